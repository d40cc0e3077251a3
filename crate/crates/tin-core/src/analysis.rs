pub struct Aggregation; pub struct CorrelationGrid; pub struct GridKind; pub struct PearsonBin; pub struct PearsonReport;
