//! Python bindings: map and task helpers, demonstration files, ITD and the
//! exact bound checks.

use pyo3::prelude::*;

fn py_err(e: psiphi::Error) -> PyErr {
    pyo3::exceptions::PyValueError::new_err(e.to_string())
}

#[pymodule]
mod psiphi_py {
    use super::py_err;
    use pyo3::prelude::*;
    use psiphi::agent::TaskEvaluator;
    use psiphi::demo::DemoSet;
    use psiphi::grid::GridSpec;
    use psiphi::harness::{self, ExperimentConfig, InvarianceConfig, TheoremConfig};
    use psiphi::itd::{action_accuracy, run_itd, ItdConfig};
    use std::path::Path;

    fn grid(map: Option<&str>) -> PyResult<GridSpec> {
        match map {
            Some(text) => GridSpec::parse(text).map_err(py_err),
            None => Ok(GridSpec::coingrid()),
        }
    }

    /// Text of the canonical CoinGrid map.
    #[pyfunction]
    fn coingrid() -> String {
        GridSpec::coingrid().to_string()
    }

    /// Weight vector `[red, green, yellow, step]` of a task name such as `R-G`.
    #[pyfunction]
    fn parse_task(name: &str) -> PyResult<Vec<f64>> {
        Ok(harness::parse_task(name).map_err(py_err)?.weights)
    }

    /// Exact `(random, oracle)` episode returns of a task.
    #[pyfunction]
    #[pyo3(signature = (task, map=None))]
    fn reference_returns(task: &str, map: Option<&str>) -> PyResult<(f64, f64)> {
        let spec = grid(map)?;
        let ev = TaskEvaluator::new(&spec, &harness::parse_task(task).map_err(py_err)?).map_err(py_err)?;
        Ok((ev.random_return, ev.oracle_return))
    }

    /// Writes demonstrations of one agent per task to `path`; returns the step count.
    #[pyfunction]
    #[pyo3(signature = (tasks, path, temperature=0.05, episodes=200, seed=0, map=None))]
    fn generate_demos(tasks: Vec<String>, path: &str, temperature: f64, episodes: usize, seed: u64, map: Option<&str>) -> PyResult<usize> {
        let spec = grid(map)?;
        let mut cfg = ExperimentConfig::default();
        cfg.demos.temperature = temperature;
        cfg.demos.episodes_per_agent = episodes;
        cfg.sync();
        let demos = cfg.demos_for(&spec, &tasks, seed).map_err(py_err)?;
        demos.save(Path::new(path)).map_err(py_err)
    }

    /// ITD on a demo file. Returns each agent's preference vector and
    /// training-set action accuracy.
    #[pyfunction]
    #[pyo3(signature = (path, d=4, steps=1000, lr=1e-3, seed=0))]
    fn train_itd(path: &str, d: usize, steps: usize, lr: f64, seed: u64) -> PyResult<Vec<(Vec<f64>, f64)>> {
        let demos = DemoSet::load(Path::new(path)).map_err(py_err)?;
        let cfg = ExperimentConfig::default();
        let arch = cfg.arch(&GridSpec::coingrid(), d, demos.n_agents);
        let itd = ItdConfig {
            max_steps: steps,
            lr,
            eval_every: 0,
            ..ItdConfig::default()
        };
        let (p, _) = run_itd(&demos, arch, &itd, seed).map_err(py_err)?;
        (1..=demos.n_agents)
            .map(|k| Ok((p.w(k).map_err(py_err)?.to_vec(), action_accuracy(&p, k, &demos).map_err(py_err)?)))
            .collect()
    }

    /// Violation counts `(bound, lemma)` over `n_mdps` random MDPs.
    #[pyfunction]
    #[pyo3(signature = (n_mdps=100, seed=0))]
    fn check_bounds(n_mdps: usize, seed: u64) -> PyResult<(usize, usize)> {
        let cfg = TheoremConfig {
            n_mdps,
            invariance: InvarianceConfig {
                n_mdps: 0,
                ..InvarianceConfig::default()
            },
            ..TheoremConfig::default()
        };
        let r = harness::check_theorems(&cfg, seed).map_err(py_err)?;
        Ok((r.bound_violations(), r.lemma_violations()))
    }

    /// Default experiment config as TOML.
    #[pyfunction]
    fn default_config() -> String {
        let mut c = ExperimentConfig::default();
        c.sync();
        c.to_toml()
    }

    /// Hash recorded in run manifests for a TOML config.
    #[pyfunction]
    fn config_hash(text: &str) -> PyResult<String> {
        Ok(ExperimentConfig::from_toml(text).map_err(py_err)?.hash())
    }
}
