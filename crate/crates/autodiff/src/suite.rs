//! A small graph per primitive, each checked against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{gradient_check_on, GradCheckConfig, GradCheckReport};
use crate::ops::{BatchNormMode, Conv2dSpec};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub kind: OpKind,
    /// Which variant of the primitive was exercised.
    pub case: &'static str,
    pub report: GradCheckReport,
}

/// Smooth points: magnitudes in `[0.2, 1.2]` with random sign, which keeps
/// ReLU and `|·|` inputs well away from their kinks.
fn point(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.2);
            if positive || rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, values)
        .expect("non-empty shape")
        .with_requires_grad(true)
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let n: usize = shape.iter().product();
    let r = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    t.sum(p)
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    kind: OpKind,
    name: &'static str,
    points: Vec<Tensor>,
    build: Builder,
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = seed;
    let mut out: Vec<Case> = Vec::new();
    let mut case = |kind, name, points: Vec<Tensor>, build: Builder| {
        out.push(Case {
            kind,
            name,
            points,
            build,
        })
    };

    case(
        OpKind::Add,
        "same-shape",
        vec![point(&mut rng, &[2, 3], false), point(&mut rng, &[2, 3], false)],
        Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Sub,
        "same-shape",
        vec![point(&mut rng, &[2, 3], false), point(&mut rng, &[2, 3], false)],
        Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Mul,
        "same-shape",
        vec![point(&mut rng, &[2, 3], false), point(&mut rng, &[2, 3], false)],
        Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Scale,
        "constant",
        vec![point(&mut rng, &[5], false)],
        Box::new(move |t, v| {
            let y = t.scale(v[0], -2.5)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::AddScalar,
        "constant",
        vec![point(&mut rng, &[5], false)],
        Box::new(move |t, v| {
            let y = t.add_scalar(v[0], 0.75)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Relu,
        "off-kink",
        vec![point(&mut rng, &[3, 4], false)],
        Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Exp,
        "elementwise",
        vec![point(&mut rng, &[6], false)],
        Box::new(move |t, v| {
            let y = t.exp(v[0])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Log,
        "eps-guarded",
        vec![point(&mut rng, &[6], true)],
        Box::new(move |t, v| {
            let y = t.log(v[0], 1e-12)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Abs,
        "off-kink",
        vec![point(&mut rng, &[6], false)],
        Box::new(move |t, v| {
            let y = t.abs(v[0])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Softplus,
        "elementwise",
        vec![point(&mut rng, &[6], false)],
        Box::new(move |t, v| {
            let y = t.softplus(v[0])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Sum,
        "squared-total",
        vec![point(&mut rng, &[2, 3], false)],
        Box::new(move |t, v| {
            let y = t.sum(v[0])?;
            t.mul(y, y)
        }),
    );
    case(
        OpKind::Mean,
        "squared-mean",
        vec![point(&mut rng, &[2, 3], false)],
        Box::new(move |t, v| {
            let y = t.mean(v[0])?;
            t.mul(y, y)
        }),
    );
    case(
        OpKind::MeanAxis,
        "middle-axis",
        vec![point(&mut rng, &[2, 3, 4], false)],
        Box::new(move |t, v| {
            let y = t.mean_axis(v[0], 1)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Reshape,
        "flatten",
        vec![point(&mut rng, &[2, 3, 2], false)],
        Box::new(move |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Permute,
        "rank-3",
        vec![point(&mut rng, &[2, 3, 4], false)],
        Box::new(move |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Matmul,
        "2d",
        vec![point(&mut rng, &[3, 3], false), point(&mut rng, &[3, 3], false)],
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Matmul,
        "batched",
        vec![point(&mut rng, &[2, 3, 4], false), point(&mut rng, &[2, 4, 2], false)],
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Matmul,
        "shared-rhs",
        vec![point(&mut rng, &[2, 3, 4], false), point(&mut rng, &[4, 2], false)],
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::BiasAdd,
        "channel-axis",
        vec![point(&mut rng, &[2, 3, 2, 2], false), point(&mut rng, &[3], false)],
        Box::new(move |t, v| {
            let y = t.bias_add(v[0], v[1])?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Conv2d,
        "3x3-stride2-pad1",
        vec![
            point(&mut rng, &[2, 2, 5, 6], false),
            point(&mut rng, &[3, 2, 3, 3], false),
            point(&mut rng, &[3], false),
        ],
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(2, 1))?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Conv2d,
        "1x1",
        vec![
            point(&mut rng, &[2, 3, 4, 4], false),
            point(&mut rng, &[2, 3, 1, 1], false),
        ],
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, Conv2dSpec::new(1, 0))?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::BatchNorm,
        "train",
        vec![
            point(&mut rng, &[4, 3, 2, 2], false),
            point(&mut rng, &[3], true),
            point(&mut rng, &[3], false),
        ],
        Box::new(move |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::BatchNorm,
        "eval",
        vec![
            point(&mut rng, &[4, 3], false),
            point(&mut rng, &[3], true),
            point(&mut rng, &[3], false),
        ],
        Box::new(move |t, v| {
            let mode = BatchNormMode::Eval {
                mean: &[0.1, -0.2, 0.3],
                var: &[0.5, 1.5, 2.0],
            };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Softmax,
        "middle-axis",
        vec![point(&mut rng, &[2, 5, 3], false)],
        Box::new(move |t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Renormalize,
        "last-axis",
        vec![point(&mut rng, &[3, 4], true)],
        Box::new(move |t, v| {
            let y = t.renormalize(v[0], 1)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::UpsampleNearest,
        "x2",
        vec![point(&mut rng, &[1, 2, 3, 2], false)],
        Box::new(move |t, v| {
            let y = t.upsample_nearest(v[0], 2)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::UpsampleBilinear,
        "x4",
        vec![point(&mut rng, &[1, 2, 3, 2], false)],
        Box::new(move |t, v| {
            let y = t.upsample_bilinear(v[0], 4)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::AvgPool,
        "2x2",
        vec![point(&mut rng, &[2, 2, 4, 4], false)],
        Box::new(move |t, v| {
            let y = t.avg_pool(v[0], 2)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::GlobalAvgPool,
        "spatial",
        vec![point(&mut rng, &[2, 3, 2, 3], false)],
        Box::new(move |t, v| {
            let y = t.global_avg_pool(v[0])?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    case(
        OpKind::Concat,
        "channels",
        vec![point(&mut rng, &[2, 1, 3], false), point(&mut rng, &[2, 2, 3], false)],
        Box::new(move |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    );
    out
}

/// Checks every primitive at random smooth points drawn from `seed`.
pub fn primitive_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<PrimitiveCheck>> {
    primitive_suite_on(seed, cfg, |_| {})
}

/// [`primitive_suite`] with a tape hook, e.g. to inject a backward fault.
pub fn primitive_suite_on(
    seed: u64,
    cfg: &GradCheckConfig,
    prepare: impl Fn(&mut Tape),
) -> Result<Vec<PrimitiveCheck>> {
    cases(seed)
        .into_iter()
        .map(|c| {
            let report = gradient_check_on(&c.build, &c.points, cfg, &prepare)?;
            Ok(PrimitiveCheck {
                kind: c.kind,
                case: c.name,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_is_covered() {
        let kinds: std::collections::BTreeSet<OpKind> = cases(0).iter().map(|c| c.kind).collect();
        for k in OpKind::PRIMITIVES {
            assert!(kinds.contains(k), "no gradient case for {k}");
        }
    }
}
