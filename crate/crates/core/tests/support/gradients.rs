//! Finite-difference checks for every differentiable op and loss.
//!
//! Each case builds a small random problem from a seed and returns the
//! worst relative error over all of its differentiable inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitu::autodiff::{grad_check, Graph, Var, GRAD_CHECK_EPS};
use vitu::heads::{arcface_logits, mse_distill, pad_head_forward, PadHeadParams};
use vitu::vit::{forward_patches, transformer_block, BackboneParams, ModelConfig};
use vitu::{Result, Tensor};

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any node to a scalar through a fixed random projection, so every
/// output coordinate contributes a distinct weight to the gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Checks `f` with respect to each input in turn; the other inputs stay
/// constant. Returns the worst error.
fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let err = grad_check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { g.constant(t.clone()) })
                    .collect();
                f(g, &vars)
            },
            &inputs[k],
            GRAD_CHECK_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Binds `params` with the `k`-th tensor (visit order of `try_map`)
/// replaced by `leaf` and everything else frozen.
fn bind_one<W>(
    g: &mut Graph<f64>,
    map: impl Fn(&mut dyn FnMut(&Tensor<f64>) -> Result<Var>) -> Result<W>,
    k: usize,
    leaf: Var,
) -> Result<W> {
    let mut i = 0;
    map(&mut |t| {
        let v = if i == k { leaf } else { g.constant(t.clone()) };
        i += 1;
        Ok(v)
    })
}

fn tensors_of<W>(map: impl Fn(&mut dyn FnMut(&Tensor<f64>) -> Result<()>) -> Result<W>) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    map(&mut |t| {
        out.push(t.clone());
        Ok(())
    })
    .unwrap();
    out
}

/// A random backbone with non-trivial norms and biases.
fn jittered_backbone(config: &ModelConfig, rng: &mut ChaCha8Rng) -> BackboneParams<f64> {
    let base = BackboneParams::<f64>::init(config, rng);
    base.try_map(&mut |t| {
        let noise = random(rng, t.shape(), -0.3, 0.3);
        Tensor::new(t.shape().to_vec(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
    })
    .unwrap()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_identities: 5,
        pad_hidden_dim: 6,
    }
}

pub type Case = (&'static str, fn(u64) -> Result<f64>);

pub const CASES: &[Case] = &[
    ("matmul", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[4, 5], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, s)
        })
    }),
    ("matmul_nt", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[5, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y, s)
        })
    }),
    ("add", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, s)
        })
    }),
    ("sub", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, s)
        })
    }),
    ("mul", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, s)
        })
    }),
    ("add_bias", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, s)
        })
    }),
    ("scale", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.scale(v[0], -1.7)?;
            project(g, y, s)
        })
    }),
    ("sum", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        })
    }),
    ("mean", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        })
    }),
    ("softmax", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 5], -2.0, 2.0)];
        check_inputs(&ins, |g, v| {
            let a = g.softmax(v[0], 1)?;
            let b = g.softmax(v[0], 0)?;
            let y = g.add(a, b)?;
            project(g, y, s)
        })
    }),
    ("layer_norm", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 6], -2.0, 2.0), random(&mut r, &[6], 0.5, 1.5), random(&mut r, &[6], -0.5, 0.5)];
        check_inputs(&ins, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            project(g, y, s)
        })
    }),
    ("gelu", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[4, 5], -3.0, 3.0)];
        check_inputs(&ins, |g, v| {
            let y = g.gelu(v[0])?;
            project(g, y, s)
        })
    }),
    ("transpose", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, s)
        })
    }),
    ("attention", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        // batch 2, sequence 3, d 4, two heads
        let ins = [random(&mut r, &[6, 12], -1.5, 1.5)];
        check_inputs(&ins, |g, v| {
            let y = g.attention(v[0], 3, 2)?;
            project(g, y, s)
        })
    }),
    ("tokens", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[6, 4], -1.0, 1.0), random(&mut r, &[1, 4], -1.0, 1.0), random(&mut r, &[4, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.tokens(v[0], v[1], v[2], 2)?;
            project(g, y, s)
        })
    }),
    ("gather_rows", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[4, 3], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            project(g, y, s)
        })
    }),
    ("pool_patches", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[8, 3], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.pool_patches(v[0], 4)?;
            project(g, y, s)
        })
    }),
    ("l2_normalize", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 5], 0.2, 1.0)];
        check_inputs(&ins, |g, v| {
            let y = g.l2_normalize(v[0])?;
            project(g, y, s)
        })
    }),
    ("angular_margin", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        // Keep the target cosines away from the fallback kink at cos(π − m).
        let ins = [random(&mut r, &[4, 5], -0.8, 0.95)];
        check_inputs(&ins, |g, v| {
            let y = g.angular_margin(v[0], &[0, 3, 4, 1], 0.5)?;
            project(g, y, s)
        })
    }),
    ("cross_entropy", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[4, 5], -3.0, 3.0)];
        check_inputs(&ins, |g, v| g.cross_entropy(v[0], &[1, 0, 4, 4]))
    }),
    ("mse", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| g.mse(v[0], v[1]))
    }),
    ("arcface_loss", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ins = [random(&mut r, &[3, 6], -1.0, 1.0), random(&mut r, &[5, 6], -1.0, 1.0)];
        check_inputs(&ins, |g, v| {
            // Scale 8 keeps the softmax from saturating at this size.
            let logits = arcface_logits(g, v[0], v[1], &[2, 0, 4], 0.5, 8.0)?;
            g.cross_entropy(logits, &[2, 0, 4])
        })
    }),
    ("pad_head_loss", |s| {
        let config = tiny_config();
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let heads = PadHeadParams::<f64>::init(&config, &mut r);
        let head = heads.heads[0].try_map(&mut |t| Ok(random(&mut r, t.shape(), -0.5, 0.5))).unwrap();
        let tokens = random(&mut r, &[2 * config.seq_len(), config.embed_dim], -1.0, 1.0);
        let seq = config.seq_len();
        let mut inputs = vec![tokens];
        inputs.extend(tensors_of(|f| head.try_map(&mut |t| f(t))));
        check_inputs(&inputs, |g, v| {
            let w = vitu::heads::PadHeadWeights { fc1_weight: v[1], fc1_bias: v[2], fc2_weight: v[3], fc2_bias: v[4] };
            let logits = pad_head_forward(g, v[0], &w, seq)?;
            g.cross_entropy(logits, &[0, 1])
        })
    }),
    ("distill_loss", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let teacher = random(&mut r, &[3, 4], -1.0, 1.0);
        let ins = [random(&mut r, &[3, 4], -1.0, 1.0)];
        check_inputs(&ins, |g, v| mse_distill(g, v[0], &teacher))
    }),
    ("transformer_block", |s| {
        // Toy block: 4 tokens × 8 features, two heads.
        let config = tiny_config();
        let seq = 4;
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let params = jittered_backbone(&config, &mut r);
        let block = params.blocks[0].clone();
        let x = random(&mut r, &[seq, config.embed_dim], -1.0, 1.0);
        let mut worst = check_inputs(&[x.clone()], |g, v| {
            let w = block.try_map(&mut |t| Ok(g.constant(t.clone())))?;
            let y = transformer_block(g, v[0], &w, seq, config.heads)?.tokens;
            project(g, y, s)
        })?;
        let n = tensors_of(|f| block.try_map(&mut |t| f(t))).len();
        for k in 0..n {
            let t = tensors_of(|f| block.try_map(&mut |t| f(t))).swap_remove(k);
            let err = grad_check(
                |g, leaf| {
                    let xv = g.constant(x.clone());
                    let w = bind_one(g, |f| block.try_map(&mut |t| f(t)), k, leaf)?;
                    let y = transformer_block(g, xv, &w, seq, config.heads)?.tokens;
                    project(g, y, s)
                },
                &t,
                GRAD_CHECK_EPS,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }),
    ("backbone_embedding", |s| {
        let config = tiny_config();
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let params = jittered_backbone(&config, &mut r);
        let patches = random(&mut r, &[2 * config.num_patches(), config.patch_dim()], 0.0, 1.0);
        let mut worst = 0.0f64;
        let all = tensors_of(|f| params.try_map(&mut |t| f(t)));
        // Embedding tensors and the final norm come first in visit order.
        for k in 0..6 {
            let err = grad_check(
                |g, leaf| {
                    let p = g.constant(patches.clone());
                    let w = bind_one(g, |f| params.try_map(&mut |t| f(t)), k, leaf)?;
                    let out = forward_patches(g, &w, &config, p, 2)?;
                    project(g, out.cls, s)
                },
                &all[k],
                GRAD_CHECK_EPS,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }),
];

/// Worst error of each case over `seeds`.
pub fn run_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, Result<f64>)> {
    CASES
        .iter()
        .map(|(name, case)| {
            let mut worst = Ok(0.0f64);
            for s in seeds.clone() {
                worst = match (worst, case(s)) {
                    (Ok(w), Ok(e)) => Ok(w.max(e)),
                    (Err(e), _) | (_, Err(e)) => Err(e),
                };
            }
            (*name, worst)
        })
        .collect()
}
