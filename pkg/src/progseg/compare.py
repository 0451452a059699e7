"""Train unet / gan / progressive on one split per seed and tabulate the results."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from .config import Config
from .data import Dataset, split
from .errors import ContractError, ProgsegError
from .metrics import ComparisonReport, RunResult, evaluate_model, per_image_metrics, predict_masks
from .train import fit


def _run_one(args) -> RunResult:
    train_ds, test_ds, config, mode, seed = args
    cfg = config.train_config(mode, seed)
    try:
        state, records = fit(train_ds, config.architecture(), config.schedule(), cfg)
    except ProgsegError as e:
        e.args = (f"{e} [mode {mode}, seed {seed}]",)
        raise
    g, gs = state.models.generator, state.gs
    train_m = evaluate_model(g, gs, train_ds, config.threshold)
    test_m = evaluate_model(g, gs, test_ds, config.threshold)
    pred = predict_masks(g, test_ds.images, gs, config.threshold)
    fpr = [m.false_positive_rate for m in per_image_metrics(pred, test_ds.masks)]
    return RunResult(mode, seed, train_m, test_m, records, fpr)


def compare_models(dataset: Dataset, config: Config, seeds=None, modes=None,
                   n_jobs: int | None = None, on_result=None) -> ComparisonReport:
    """Every (mode, seed) pair trains on the same split (``config.split_seed``).

    ``on_result`` is called with each RunResult as it completes (serial runs
    only report in order; parallel runs report in submission order too).
    """
    seeds = list(config.seeds if seeds is None else seeds)
    modes = list(config.modes if modes is None else modes)
    if not seeds:
        raise ContractError("compare_models needs at least one seed")
    if not modes:
        raise ContractError("compare_models needs at least one mode")
    tr, te = split(len(dataset), config.split_fraction, config.split_seed)
    train_ds, test_ds = dataset.subset(tr), dataset.subset(te)
    jobs = [(train_ds, test_ds, config, m, s) for s in seeds for m in modes]
    n_jobs = config.n_jobs if n_jobs is None else n_jobs
    runs = []
    if n_jobs <= 1:
        for job in jobs:
            runs.append(_run_one(job))
            if on_result:
                on_result(runs[-1])
    else:
        with ProcessPoolExecutor(n_jobs) as pool:
            for r in pool.map(_run_one, jobs):
                runs.append(r)
                if on_result:
                    on_result(r)
    return ComparisonReport(runs, seeds, config.digest())
