//! Central finite-difference checks of every loss term on a tiny model.

use m3l_autograd::check::{finite_difference_check, CheckOptions, ParamCheck};
use m3l_autograd::{DType, Graph, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Modalities;
use crate::env::{IMAGE_SIZE, TAXEL_GRID};
use crate::error::{Error, Result};
use crate::model::{Forward, M3lModel, ModelSpec, PpoBatch, RepOptions};
use crate::policy::{gaussian_log_prob, PpoCoefficients, ACTION_DIM};
use crate::tokenizer::ObsBatch;

pub const COMPONENTS: [&str; 5] = ["l_rep", "l_clip", "l_critic", "entropy", "joint"];
pub const SINGLE_TOLERANCE: f64 = 1e-3;
pub const DOUBLE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Run in f64 with the tighter tolerance.
    pub double: bool,
    /// Corrupt the analytic gradients before comparing (negative control).
    pub inject_fault: bool,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { double: false, inject_fault: false, seed: 7 }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Parameter with the largest error.
    pub worst: String,
    pub params: Vec<ParamCheck>,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub dtype: DType,
    pub components: Vec<ComponentCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentCheck::passed)
    }
}

/// Tiny model with every parameter jittered away from its initial value, so
/// zero-initialized layers do not hide gradients upstream of them.
fn tiny_setup(seed: u64) -> Result<(M3lModel, ParamStore<f64>, ObsBatch<f64>, PpoBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let model = M3lModel::new(&mut store, ModelSpec::tiny(), &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += 0.25 * n;
        }
    }
    let b = 2;
    let c = 3 * model.spec.frames;
    let mut uniform = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    let image = Tensor::new(&[b, IMAGE_SIZE, IMAGE_SIZE, c], uniform(b * IMAGE_SIZE * IMAGE_SIZE * c, 0.0, 1.0))?;
    let left = Tensor::new(&[b, TAXEL_GRID, TAXEL_GRID, c], uniform(b * TAXEL_GRID * TAXEL_GRID * c, -1.0, 1.0))?;
    let right = Tensor::new(&[b, TAXEL_GRID, TAXEL_GRID, c], uniform(b * TAXEL_GRID * TAXEL_GRID * c, -1.0, 1.0))?;
    let obs = ObsBatch { batch: b, frames: model.spec.frames, image: Some(image), touch: Some((left, right)) };

    let actions: Vec<[f64; ACTION_DIM]> = (0..b).map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal))).collect();
    let mut g = Graph::new(&store);
    let out = model.policy_forward(&mut g, &obs, Modalities::BOTH)?;
    let at = Tensor::new(&[b, ACTION_DIM], actions.iter().flatten().copied().collect())?;
    let logp = gaussian_log_prob(&mut g, out.mean, out.log_std, &at)?;
    let current: Vec<f64> = g.value(logp).data().to_vec();
    // one ratio inside the clip range and one far outside it, both away from the kinks
    let offsets = [0.05, 0.6];
    let batch = PpoBatch {
        actions,
        old_log_probs: current.iter().zip(offsets).map(|(l, o)| l + o).collect(),
        advantages: vec![1.0, -0.7],
        returns: vec![0.4, -0.3],
    };
    Ok((model, store, obs, batch))
}

fn forward<T: Scalar>(
    component: &str,
    model: &M3lModel,
    g: &mut Graph<'_, T>,
    obs: &ObsBatch<T>,
    batch: &PpoBatch,
    seed: u64,
) -> Result<m3l_autograd::Var> {
    let rep = RepOptions { mask_ratio: 0.5, beta_t: 10.0, all_tokens: false };
    let coef = PpoCoefficients { clip_epsilon: 0.2, beta_v: 0.5, beta_h: 0.01 };
    // the mask stream is reseeded so every evaluation sees the same mask
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ppo_node = |f: Forward<T>, pick: fn(&crate::policy::PpoNodes) -> m3l_autograd::Var| {
        f.ppo.map(|n| pick(&n)).ok_or_else(|| Error::Config("PPO branch did not run".into()))
    };
    match component {
        "l_rep" => Ok(model.reconstruction(g, obs, Modalities::BOTH, &rep, &mut rng)?.loss),
        "l_clip" => ppo_node(model.ppo(g, obs, Modalities::BOTH, batch, &coef)?, |n| n.l_clip),
        "l_critic" => ppo_node(model.ppo(g, obs, Modalities::BOTH, batch, &coef)?, |n| n.l_critic),
        "entropy" => ppo_node(model.ppo(g, obs, Modalities::BOTH, batch, &coef)?, |n| n.entropy),
        "joint" => Ok(model.joint(g, obs, Some((Modalities::BOTH, rep)), Modalities::BOTH, batch, &coef, &mut rng)?.loss),
        other => Err(Error::Config(format!("unknown gradcheck component `{other}`"))),
    }
}

fn cast_obs<T: Scalar>(obs: &ObsBatch<f64>) -> ObsBatch<T> {
    ObsBatch {
        batch: obs.batch,
        frames: obs.frames,
        image: obs.image.as_ref().map(Tensor::cast),
        touch: obs.touch.as_ref().map(|(l, r)| (l.cast(), r.cast())),
    }
}

/// Analytic gradients are computed in `T`; the numeric reference always runs in f64.
fn check_component<T: Scalar>(component: &'static str, opts: &GradcheckOptions, fd: &CheckOptions, tolerance: f64) -> Result<ComponentCheck> {
    let (model, reference, obs64, batch) = tiny_setup(opts.seed)?;
    let store: ParamStore<T> = reference.cast();
    let obs: ObsBatch<T> = cast_obs(&obs64);
    let mask_seed = opts.seed ^ 0x5eed;
    let mut g = Graph::new(&store);
    let node = forward(component, &model, &mut g, &obs, &batch, mask_seed)?;
    let mut grads = g.backward(node)?;
    drop(g);
    if opts.inject_fault {
        grads.scale(T::of(1.05));
    }
    let params = finite_difference_check(
        &store,
        &grads,
        |s: &ParamStore<f64>| {
            let mut g = Graph::new(s);
            let node = forward(component, &model, &mut g, &obs64, &batch, mask_seed).map_err(|e| m3l_autograd::Error::Shape(e.to_string()))?;
            Ok(g.value(node).item())
        },
        fd,
    )?;
    let worst = params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).map(|p| p.name.clone()).unwrap_or_default();
    let max_rel_error = params.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(ComponentCheck { name: component, max_rel_error, tolerance, worst, params })
}

/// Checks every loss component; see [`GradcheckReport::passed`].
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    // gradients below the floor are treated as exactly zero (e.g. attention key biases,
    // which softmax shift invariance cancels); f32 rounding leaves noise around 1e-8 there
    let floor = if opts.double { 1e-9 } else { 1e-6 };
    let fd = CheckOptions { eps: 1e-3, max_coords: 24, abs_floor: floor };
    let mut components = Vec::new();
    for name in COMPONENTS {
        let c = if opts.double {
            check_component::<f64>(name, opts, &fd, DOUBLE_TOLERANCE)?
        } else {
            check_component::<f32>(name, opts, &fd, SINGLE_TOLERANCE)?
        };
        components.push(c);
    }
    Ok(GradcheckReport { dtype: if opts.double { DType::F64 } else { DType::F32 }, components })
}
