use super::{model_config, prepare_all, Dataset, RunConfig};
use crate::autograd::{finite_diff_check, BackwardFault, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::fusion::Ctx;
use crate::guidance::GuidanceVariant;
use crate::model::{PreparedVideo, Tr2Model};

/// Toy dimensions suitable for exhaustive finite differences.
pub fn toy_config(guidance: GuidanceVariant) -> RunConfig {
    let mut c = RunConfig::default();
    c.guidance = guidance;
    c.gen.num_videos = 2;
    c.gen.frames_per_video = 3;
    c.gen.pairs_per_frame = 2;
    c.gen.entity_class_count = 4;
    c.gen.predicate_partition = [2, 2, 2];
    c.gen.change_rate = 0.5;
    c.gen.visual_dim = 3;
    c.gen.crop_dim = 4;
    c.fusion.d_model = 8;
    c.fusion.heads = 2;
    c.fusion.ff_dim = 8;
    c.fusion.spatial_layers = 1;
    c.fusion.temporal_layers = 1;
    c.fusion.dropout = 0.0;
    c.fusion.max_temporal_positions = 3;
    c.fusion.semantic_dim = 2;
    c.provider.dim = 6;
    c.optim.lambda = Some(1.0);
    c
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub guidance: GuidanceVariant,
    /// One entry per parameter, in store order.
    pub groups: Vec<GroupResult>,
    pub max_relative_error: f64,
    pub worst_parameter: Option<String>,
    pub tolerance: f64,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

fn objective_value(model: &Tr2Model, store: &ParamStore, batch: &[&PreparedVideo], config: &RunConfig, lambda: f64) -> Result<f64> {
    let mut ctx = Ctx::eval(store);
    let obj = model.objective(&mut ctx, batch, &config.optim, lambda)?;
    Ok(ctx.value(obj.total).item())
}

/// Full-objective finite-difference check over every parameter, with
/// dropout disabled. `fault` corrupts one backward rule for negative tests.
pub fn gradcheck(config: &RunConfig, step: f64, tolerance: f64, fault: Option<BackwardFault>) -> Result<GradcheckOutcome> {
    config.validate()?;
    if config.fusion.dropout != 0.0 {
        return Err(Error::Config("gradcheck needs fusion.dropout = 0".into()));
    }
    let dataset = Dataset::load(config)?;
    let prepared = prepare_all(config, &dataset.vocabulary, &dataset.videos, &dataset.embeddings)?;
    let batch: Vec<&PreparedVideo> = prepared.iter().collect();
    let (model, store) = Tr2Model::build(&model_config(config, &dataset.vocabulary), config.seed)?;
    let lambda = config.optim.lambda_for(config.task);

    let analytic = {
        let mut ctx = Ctx::eval(&store);
        ctx.tape.set_fault(fault);
        let obj = model.objective(&mut ctx, &batch, &config.optim, lambda)?;
        let mut g = ctx.tape.backward(obj.total)?;
        ctx.params.gradients(&mut g)
    };
    let params: Vec<Tensor> = store.tensors().to_vec();
    let mut scratch = store.clone();
    let report = finite_diff_check(
        |p| {
            scratch.set_tensors(p.to_vec())?;
            objective_value(&model, &scratch, &batch, config, lambda)
        },
        &params,
        &analytic,
        step,
        tolerance,
    )?;
    let groups = store
        .names()
        .zip(&report.per_param)
        .map(|(n, &e)| GroupResult {
            name: n.to_string(),
            max_relative_error: e,
        })
        .collect();
    Ok(GradcheckOutcome {
        guidance: config.guidance,
        groups,
        max_relative_error: report.max_relative_error,
        worst_parameter: report.worst.map(|(i, _)| store.names().nth(i).unwrap_or_default().to_string()),
        tolerance,
    })
}
