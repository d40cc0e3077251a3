pub struct OptimizerKind; pub struct TrainConfig; pub struct TrainReport;
