use std::path::Path;

use anyhow::{bail, Result};
use p3d_core::backbone::Conditioning;
use p3d_core::evalharness::{
    enstrophy_graph, enstrophy_l2, nrmse, profile_l2, profile_moments, vorticity_fd, write_metrics_csv,
    write_pgm_slice, write_series_csv, MetricRow, ProfileMoments, RolloutStrategy, Surrogate,
};
use p3d_core::numerics::{blob, Tensor};
use p3d_core::training::{euler_integrate, pad_channels, stack, Objective, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{conditioned, create_dir, datasets, pair_dataset, to_f64, weights};
use crate::config::{RolloutConfig, SampleConfig};

fn slice_range(t: &Tensor<f64>) -> (f64, f64) {
    let m = t.max_abs().max(1e-12);
    (-m, m)
}

fn write_slices(dir: &Path, name: &str, pred: &Tensor<f64>, reference: &Tensor<f64>) -> Result<()> {
    let range = slice_range(reference);
    let z = reference.shape()[3] / 2;
    write_pgm_slice(&dir.join(format!("{name}_pred.pgm")), pred, 0, z, range)?;
    write_pgm_slice(&dir.join(format!("{name}_ref.pgm")), reference, 0, z, range)?;
    Ok(())
}

pub fn rollout(cfg: &RolloutConfig, out: &Path) -> Result<()> {
    let trainer = Trainer::resume(&cfg.checkpoint)?;
    if !matches!(trainer.setup.objective, Objective::Mse) {
        bail!("rollout needs a model trained on next states; use sample for flow-matching models");
    }
    let surrogate = Surrogate {
        model: &trainer.model,
        context: trainer.context.as_ref(),
        store: weights(&trainer, cfg.ema),
    };
    let with_cond = conditioned(&trainer);
    create_dir(out)?;
    let mut rows = Vec::new();
    for (name, ds) in datasets(&cfg.data)? {
        let available = ds.states.len().saturating_sub(cfg.start + 1);
        if cfg.steps == 0 || cfg.steps > available {
            bail!(
                "{name} holds {available} states after the start state; asked for {} steps",
                cfg.steps
            );
        }
        let r = ds.manifest.sim.resolution;
        let strategy = cfg.strategy.unwrap_or(RolloutStrategy::Tiled { tile: r });
        let cond = if with_cond {
            ds.conditioning()
        } else {
            Conditioning::default()
        };
        let u0: Tensor<f32> = ds.states[cfg.start].cast();
        let traj = surrogate.rollout(&u0, &cond, cfg.steps, strategy)?;
        let run_dir = out.join(&name);
        create_dir(&run_dir)?;
        let spacing = std::array::from_fn(|a| ds.manifest.domain / r[a] as f64);
        for (k, pred) in traj.iter().enumerate() {
            let step = k + 1;
            let pred = to_f64(pred);
            let reference = &ds.states[cfg.start + step];
            rows.push(MetricRow {
                run: name.clone(),
                step,
                metric: "nrmse".into(),
                value: nrmse(&pred, reference)?,
            });
            if let Some(window) = cfg.enstrophy {
                if pred.shape()[0] == 3 {
                    let gp = enstrophy_graph(&vorticity_fd(&pred, spacing, true)?, window)?;
                    let gr = enstrophy_graph(&vorticity_fd(reference, spacing, true)?, window)?;
                    rows.push(MetricRow {
                        run: name.clone(),
                        step,
                        metric: "enstrophy_l2".into(),
                        value: enstrophy_l2(&gp, &gr)?,
                    });
                    if step == cfg.steps {
                        let k: Vec<f64> = (0..gp.shells.len()).map(|i| i as f64).collect();
                        write_series_csv(&run_dir.join("enstrophy_pred.csv"), ["k", "enstrophy"], &k, &gp.shells)?;
                        write_series_csv(&run_dir.join("enstrophy_ref.csv"), ["k", "enstrophy"], &k, &gr.shells)?;
                    }
                }
            }
            if cfg.save_states {
                blob::write_file(&run_dir.join(format!("state_{step:05}.blob")), &[("state", &pred)])?;
            }
            if step == cfg.steps {
                write_slices(&run_dir, "final", &pred, reference)?;
            }
        }
        let last = rows
            .iter()
            .rev()
            .find(|r| r.run == name && r.metric == "nrmse")
            .map(|r| r.value);
        println!(
            "{name}: nRMSE after {} steps {:.4e}",
            cfg.steps,
            last.unwrap_or(f64::NAN)
        );
    }
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    Ok(())
}

fn write_profiles(dir: &Path, tag: &str, p: &ProfileMoments) -> Result<()> {
    let x: Vec<f64> = (0..p.mean.len()).map(|i| i as f64).collect();
    for (m, name) in [(1, "mean"), (2, "variance"), (3, "skewness")] {
        write_series_csv(
            &dir.join(format!("profile_{name}_{tag}.csv")),
            ["x1", name],
            &x,
            p.moment(m)?,
        )?;
    }
    Ok(())
}

pub fn sample(cfg: &SampleConfig, seed: u64, out: &Path) -> Result<()> {
    let trainer = Trainer::resume(&cfg.checkpoint)?;
    let Objective::FlowMatching { with_input, .. } = trainer.setup.objective else {
        bail!("sampling needs a flow-matching model");
    };
    if trainer.context.is_some() {
        bail!("sampling runs the backbone on whole states; context models are not supported");
    }
    let model = &trainer.model;
    let store = weights(&trainer, cfg.ema);
    let (cin, cout) = (model.cfg.in_channels, model.cfg.out_channels);
    let sets = datasets(&cfg.data)?;
    let data = pair_dataset(&sets, conditioned(&trainer))?;
    if data.is_empty() || cfg.samples == 0 {
        bail!("nothing to sample");
    }
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut preds, mut refs) = (Vec::new(), Vec::new());
    let mut rows = Vec::new();
    for i in 0..cfg.samples {
        let (u_in, u_out, cond) = data.pair(i % data.len());
        let c = u_out.shape()[0];
        let prefix = if with_input {
            Some(stack(&[pad_channels(u_in, cin - cout)?])?)
        } else {
            None
        };
        let conds = [cond.clone()];
        let velocity = |x: &Tensor<f32>, t: f64| -> p3d_core::Result<Tensor<f32>> {
            let input = match &prefix {
                Some(p) => Tensor::concat(&[p, x], 1)?,
                None if cin > cout => {
                    let mut pad = x.shape().to_vec();
                    pad[1] = cin - cout;
                    Tensor::concat(&[x, &Tensor::zeros(&pad)], 1)?
                }
                None => x.clone(),
            };
            let conds: Vec<Conditioning> = conds.iter().map(|c| c.with_t(t)).collect();
            model.predict(store, &input, &conds)
        };
        let mut shape = vec![1, cout];
        shape.extend_from_slice(&u_out.shape()[1..]);
        let x = euler_integrate(&velocity, Tensor::randn(&shape, &mut rng), cfg.euler_steps)?;
        let x = to_f64(&x.narrow(1, 0, c)?);
        let spatial = x.shape()[1..].to_vec();
        let x = x.reshape(&spatial)?;
        let reference = to_f64(u_out);
        rows.push(MetricRow {
            run: format!("sample{i}"),
            step: i % data.len(),
            metric: "nrmse".into(),
            value: nrmse(&x, &reference)?,
        });
        blob::write_file(&out.join(format!("sample_{i:05}.blob")), &[("state", &x)])?;
        if i == 0 {
            write_slices(out, "sample0", &x, &reference)?;
        }
        preds.push(x);
        refs.push(reference);
    }
    let pp = profile_moments(&preds, cfg.flow_channel, cfg.wall_axis)?;
    let pr = profile_moments(&refs, cfg.flow_channel, cfg.wall_axis)?;
    write_profiles(out, "pred", &pp)?;
    write_profiles(out, "ref", &pr)?;
    for m in 1..=3 {
        rows.push(MetricRow {
            run: "profiles".into(),
            step: 0,
            metric: format!("profile_l2_m{m}"),
            value: profile_l2(&pp, &pr, m)?,
        });
    }
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    println!("{} samples written to {}", cfg.samples, out.display());
    Ok(())
}
