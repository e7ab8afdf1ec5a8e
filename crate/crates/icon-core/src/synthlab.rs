pub struct Trajectory;
