pub struct RunRecord;
pub struct MetricsSummary;
