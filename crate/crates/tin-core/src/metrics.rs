pub struct EvalRecord;
