"""Command line interface: ``fmpe train | sample | logprob | evaluate | demo | bench``.

Every command writes a plain-text ``manifest.txt`` into its output directory
listing each artifact with its sha256. Exit codes: 0 success, 2 configuration or
shape errors, 3 numerical failures, 4 storage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from fmpe import __version__
from fmpe.errors import ConfigError, FMPEError, ShapeError, StorageError
from fmpe.evalmetrics import (
    MetricReport,
    append_reports,
    c2st,
    config_digest,
    jsd_1d_hist,
    mass_coverage_report,
    mmd_unbiased,
    pp_plot_data,
    write_rows_csv,
)
from fmpe.flowengine import ODESolverConfig
from fmpe.netcore import ResidualMLPConfig
from fmpe.tasks import bimodal_1d_target, cache_dir, get_task, read_samples_csv, write_samples_csv
from fmpe.theorydemos import format_table, holes_example, lipschitz_example, support_gap_count
from fmpe.training import (
    SimulationDataset,
    TrainConfig,
    fit_gaussian_flow,
    generate_dataset,
    load_trained,
    save_trained,
    train,
)

METRICS = ("c2st", "mmd", "jsd", "coverage", "pp")
DEMOS = ("gaussian-fit", "holes", "lipschitz", "time-prior")


# ----------------------------------------------------------------------------
# config files


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{n}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def _check_keys(d, cls, path):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")


def write_config_file(path, mapping):
    with open(path, "w") as fh:
        for k in sorted(mapping):
            fh.write(f"{k} = {mapping[k]}\n")
    return path


# ----------------------------------------------------------------------------
# run manifest


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    task: str
    seed: int
    config_digest: str
    out_dir: Path
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: str = ""
    artifacts: list = field(default_factory=list)
    volatile: set = field(default_factory=set)
    info: dict = field(default_factory=dict)

    def add(self, path, volatile=False):
        rel = os.path.relpath(path, self.out_dir)
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        if volatile:
            self.volatile.add(rel)
        return path

    def write(self):
        self.finished = datetime.now(timezone.utc).isoformat()
        lines = [
            f"command={self.command}", f"task={self.task}", f"seed={self.seed}",
            f"config_digest={self.config_digest}", f"version={__version__}",
            f"started={self.started}", f"finished={self.finished}",
        ]
        lines += [f"info.{k}={v}" for k, v in self.info.items()]
        for rel in self.artifacts:
            full = self.out_dir / rel
            if not full.exists():
                raise StorageError(f"artifact {rel} missing at manifest time")
            tag = " volatile" if rel in self.volatile else ""
            lines.append(f"artifact={rel} sha256={sha256_file(full)}{tag}")
        path = self.out_dir / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path


def read_manifest(path):
    out = {"artifacts": {}}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("=")
        if key == "artifact":
            rel, _, rest = value.partition(" sha256=")
            out["artifacts"][rel] = rest.split()[0]
        else:
            out[key] = value
    return out


def _out_dir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {p}: {exc}") from exc
    return p


# ----------------------------------------------------------------------------
# datasets


def write_dataset_csv(path, ds):
    n, m = ds.theta.shape[1], ds.x.shape[1]
    split = np.zeros(len(ds), dtype=int)
    split[ds.val_idx] = 1
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join([f"theta_{i}" for i in range(n)] + [f"x_{j}" for j in range(m)] + ["validation"]) + "\n")
        for th, xx, s in zip(ds.theta, ds.x, split):
            fh.write(",".join([repr(float(v)) for v in th] + [repr(float(v)) for v in xx] + [str(s)]) + "\n")
    return path


def read_dataset_csv(path):
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            table = np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])
    except OSError as exc:
        raise StorageError(f"cannot read dataset {path}: {exc}") from exc
    n = sum(h.startswith("theta_") for h in header)
    m = sum(h.startswith("x_") for h in header)
    if table.ndim != 2 or table.shape[1] != n + m + 1:
        raise ShapeError(f"{path}: malformed dataset")
    val = table[:, -1].astype(bool)
    return SimulationDataset(table[:, :n], table[:, n:n + m], np.flatnonzero(~val), np.flatnonzero(val))


def dataset_cache_path(task_name, budget, seed, validation_fraction):
    key = config_digest({"task": task_name, "budget": budget, "seed": seed, "validation": validation_fraction})
    return cache_dir() / "datasets" / f"{task_name}-n{budget}-s{seed}-{key}.csv"


def obtain_dataset(task, budget, seed, validation_fraction, dataset_path=None):
    path = Path(dataset_path) if dataset_path else dataset_cache_path(task.name, budget, seed, validation_fraction)
    if path.exists():
        ds = read_dataset_csv(path)
        if ds.theta.shape[1] != task.theta_dim or ds.x.shape[1] != task.x_dim:
            raise ShapeError(f"dataset {path} does not match task {task.name}")
        return ds, path
    ds = generate_dataset(task, budget, seed, validation_fraction)
    try:
        write_dataset_csv(path, ds)
    except OSError as exc:
        raise StorageError(f"cannot write dataset {path}: {exc}") from exc
    return ds, path


# ----------------------------------------------------------------------------
# commands


def _default_net_config(task, conditioning):
    mode = conditioning or ("concat" if task.x_dim <= 10 else "glu")
    return {"hidden_widths": "64,128,128,64", "conditioning_mode": mode}


def cmd_train(args):
    task = get_task(args.task)
    train_dict = read_config_file(args.config) if args.config else {}
    _check_keys(train_dict, TrainConfig, args.config)
    train_dict.setdefault("time_prior_alpha", "1.0" if task.sharp_boundaries else "0.0")
    train_dict["seed"] = str(args.seed)
    for key, val in (("path", args.path), ("epochs", args.epochs), ("time_prior_alpha", args.alpha)):
        if val is not None:
            train_dict[key] = str(val)
    net_dict = _default_net_config(task, args.conditioning)
    if args.net_config:
        extra = read_config_file(args.net_config)
        _check_keys(extra, ResidualMLPConfig, args.net_config)
        net_dict.update(extra)
    if args.conditioning:
        net_dict["conditioning_mode"] = args.conditioning
    net_dict.update({"input_dim": str(task.x_dim), "output_dim": str(task.theta_dim)})
    tcfg = TrainConfig.from_dict(train_dict)
    ncfg = ResidualMLPConfig.from_dict(net_dict)

    out = _out_dir(args.out)
    snapshot = {"task": task.name, "budget": args.budget}
    snapshot.update({f"train.{k}": v for k, v in tcfg.to_dict().items() if k != "checkpoint_dir"})
    snapshot.update({f"net.{k}": v for k, v in ncfg.to_dict().items()})
    digest = config_digest(snapshot)
    ckpt = out / "checkpoint.fmpe"
    manifest_path = out / "manifest.txt"
    if manifest_path.exists():
        old = read_manifest(manifest_path)
        if old.get("config_digest") != digest:
            raise ConfigError(f"{out} holds a run with a different configuration; refusing to overwrite")
        if ckpt.exists():
            print(f"run in {out} is complete; nothing to do")
            return 0

    ds, ds_path = obtain_dataset(task, args.budget, args.seed, tcfg.validation_fraction, args.dataset)
    man = RunManifest("train", task.name, args.seed, digest, out)
    man.info.update({"path": tcfg.path, "conditioning": ncfg.conditioning_mode,
                     "time_prior_alpha": tcfg.time_prior_alpha, "dataset": str(ds_path)})
    man.add(write_config_file(out / "config.txt", snapshot))

    def progress(epoch, tr, va):
        if not args.quiet:
            print(f"epoch {epoch:4d}  train {tr:.5f}  val {va:.5f}", flush=True)

    result = train(task, ncfg, tcfg, dataset=ds, progress=progress)
    man.add(save_trained(ckpt, result, task.name, tcfg, {"budget": args.budget}))
    man.add(result.log.to_csv(out / "log.csv"), volatile=True)
    man.info.update({"best_epoch": result.best_epoch, "best_val_loss": repr(result.best_val_loss)})
    man.write()
    print(f"best epoch {result.best_epoch}, validation loss {result.best_val_loss:.6f}; run in {out}")
    return 0


def _observation(args, task_name, x_dim):
    if args.x is not None:
        x = np.array([float(v) for v in args.x.split(",")])
    elif args.observation is not None:
        try:
            with open(args.observation) as fh:
                fh.readline()
                x = np.array([float(v) for v in fh.readline().strip().split(",")])
        except (OSError, ValueError) as exc:
            raise StorageError(f"cannot read observation {args.observation}: {exc}") from exc
    else:
        _, xs = get_task(task_name).observations()
        x = xs[args.obs_index]
    if x.shape != (x_dim,):
        raise ShapeError(f"observation has {x.size} entries, checkpoint expects {x_dim}")
    return x


def _solver(args):
    return ODESolverConfig(atol=args.atol, rtol=args.rtol)


def cmd_sample(args):
    posterior, net, meta = load_trained(args.checkpoint, _solver(args))
    x = _observation(args, meta.get("task", ""), net.config.input_dim)
    out = _out_dir(args.out)
    start = time.perf_counter()
    if args.log_probs:
        samples, logq = posterior.sample_and_log_prob(x, args.n, seed=args.seed)
    else:
        samples, logq = posterior.sample(x, args.n, seed=args.seed), None
    wall = time.perf_counter() - start
    man = RunManifest("sample", meta.get("task", ""), args.seed,
                      config_digest({"checkpoint": sha256_file(args.checkpoint), "n": args.n,
                                     "x": ",".join(map(repr, x)), "log_probs": args.log_probs}), out)
    man.add(write_samples_csv(out / "samples.csv", samples, logq))
    man.info.update({"network_passes": posterior.passes, "wall_seconds": f"{wall:.3f}", "n": args.n})
    man.write()
    print(f"{args.n} samples, {posterior.passes} network passes, {wall:.2f} s")
    return 0


def cmd_logprob(args):
    posterior, net, meta = load_trained(args.checkpoint, _solver(args))
    x = _observation(args, meta.get("task", ""), net.config.input_dim)
    theta = read_samples_csv(args.theta)
    if theta.shape[0] and theta.shape[1] != net.config.output_dim:
        raise ShapeError(f"theta has {theta.shape[1]} columns, checkpoint expects {net.config.output_dim}")
    out = _out_dir(args.out)
    logq = posterior.log_prob(theta, x) if theta.shape[0] else np.empty(0)
    man = RunManifest("logprob", meta.get("task", ""), args.seed,
                      config_digest({"checkpoint": sha256_file(args.checkpoint), "theta": sha256_file(args.theta)}), out)
    man.add(write_samples_csv(out / "log_prob.csv", theta.reshape(-1, net.config.output_dim), logq))
    man.info["network_passes"] = posterior.passes
    man.write()
    print(f"{theta.shape[0]} log-densities, {posterior.passes} network passes")
    return 0


def _evaluate_observation(i, metric_list, posterior, task, theta_true, x, args, out, digest):
    reports, files = [], []
    ref = task.reference_samples(x, args.n_samples, seed=args.seed + i)
    need_samples = {"c2st", "mmd", "jsd"} & set(metric_list)
    samples = posterior.sample(x, args.n_samples, seed=args.seed + i) if need_samples else None
    n = args.n_samples
    if "c2st" in metric_list:
        reports.append(MetricReport(task.name, i, "c2st", c2st(samples, ref, seed=args.seed), n, n, digest))
    if "mmd" in metric_list:
        reports.append(MetricReport(task.name, i, "mmd", mmd_unbiased(samples[:2000], ref[:2000]),
                                    min(n, 2000), min(n, 2000), digest, "median-heuristic bandwidth"))
    if "jsd" in metric_list:
        for d in range(task.theta_dim):
            val = 1000.0 * jsd_1d_hist(samples[:, d], ref[:, d])
            reports.append(MetricReport(task.name, i, f"jsd_theta_{d}", val, n, n, digest, "mnat"))
    if "coverage" in metric_list:
        rep = mass_coverage_report(posterior, x, ref[:args.n_coverage], seed=args.seed + i)
        reports.append(MetricReport(task.name, i, "coverage_delta", rep.delta, args.n_coverage,
                                    args.n_coverage, digest, "nats"))
        reports.append(MetricReport(task.name, i, "coverage_finite_fraction", rep.finite_fraction,
                                    args.n_coverage, args.n_coverage, digest))
        files.append(write_rows_csv(out / f"coverage_hist_obs{i}.csv",
                                    ["bin_lo", "bin_hi", "count_reference", "count_model"], rep.histogram_rows()))
    return reports, files


def cmd_evaluate(args):
    metric_list = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metric_list if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metric(s) {', '.join(bad)}; choose from {', '.join(METRICS)}")
    posterior, net, meta = load_trained(args.checkpoint, _solver(args))
    task = get_task(args.task or meta.get("task", ""))
    if task.theta_dim != net.config.output_dim or task.x_dim != net.config.input_dim:
        raise ShapeError(f"checkpoint does not match task {task.name}")
    out = _out_dir(args.out)
    digest = config_digest({"checkpoint": sha256_file(args.checkpoint), "metrics": ",".join(metric_list),
                            "n_samples": args.n_samples, "seed": args.seed})
    man = RunManifest("evaluate", task.name, args.seed, digest, out)
    theta_true, xs = task.observations()
    idx = range(min(args.observations, xs.shape[0]))
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(
            lambda i: _evaluate_observation(i, metric_list, posterior, task, theta_true[i], xs[i], args, out, digest),
            idx))
    reports = [r for rs, _ in results for r in rs]
    for _, files in results:
        for f in files:
            man.add(f)
    if "pp" in metric_list:
        grid, ecdf, _ = pp_plot_data(posterior, task, args.pp_observations, args.pp_samples, seed=args.seed)
        rows = [[g] + list(e) for g, e in zip(grid, ecdf)]
        man.add(write_rows_csv(out / "pp.csv", ["nominal"] + [f"theta_{d}" for d in range(task.theta_dim)], rows))
    ledger = out / "metrics.csv"
    if ledger.exists():
        ledger.unlink()
    man.add(append_reports(ledger, reports))
    man.write()
    for r in reports:
        print(f"obs {r.observation}  {r.metric:26s} {r.value:.6g} {r.note}")
    return 0


def _demo_gaussian_fit(args, out, man):
    draw = bimodal_1d_target(args.m, args.s)
    target = draw(np.random.default_rng(args.seed), args.n_target)
    fit = fit_gaussian_flow(target, steps=args.steps, seed=args.seed)
    covered = abs(fit.mu_hat) + args.m <= 2 * fit.sigma_hat
    rows = [("mu_hat", fit.mu_hat), ("sigma_hat", fit.sigma_hat), ("modes_within_2sigma", str(covered))]
    print(format_table(rows, ["quantity", "value"]))
    man.add(write_rows_csv(out / "gaussian_fit.csv", ["quantity", "value"], rows))
    return [MetricReport("bimodal_1d", 0, "mu_hat", fit.mu_hat, args.n_target, 0),
            MetricReport("bimodal_1d", 0, "sigma_hat", fit.sigma_hat, args.n_target, 0)]


def _demo_holes(args, out, man):
    eps_list = [args.eps] if args.eps is not None else [0.25, 0.1, 0.01]
    rows, reports = [], []
    for eps in eps_list:
        r = holes_example(eps)
        gap_hits = support_gap_count(eps, seed=args.seed)
        rows.append((eps, r.mse, r.mse_quadrature, "inf", f"({r.support_gap[0]:g}, {r.support_gap[1]:g})", gap_hits))
        reports.append(MetricReport("holes", 0, f"mse_eps_{eps:g}", r.mse, 0, 0))
    header = ["eps", "mse", "mse_quadrature", "kl", "support_gap", "samples_in_gap"]
    print(format_table(rows, header))
    man.add(write_rows_csv(out / "holes.csv", header, rows))
    return reports


def _demo_lipschitz(args, out, man):
    eps_list = [args.eps] if args.eps is not None else [0.25, 0.1, 0.01]
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(lipschitz_example, eps_list))
    rows = [(r.eps, r.mse, r.mse_quadrature, r.kl_lower, r.kl, r.kl_quadrature, r.q1_mass, r.bound_ratio)
            for r in results]
    header = ["eps", "mse", "mse_quadrature", "kl_lower", "kl", "kl_quadrature", "q1_mass", "bound_ratio"]
    print(format_table(rows, header))
    man.add(write_rows_csv(out / "lipschitz.csv", header, rows))
    return [MetricReport("lipschitz", 0, f"bound_ratio_eps_{r.eps:g}", r.bound_ratio, 0, 0) for r in results]


def _demo_time_prior(args, out, man):
    task = get_task("two_moons")
    ds = generate_dataset(task, args.budget, args.seed)
    theta_true, xs = task.observations()
    rows, reports = [], []
    for alpha in (0.0, 1.0):
        tcfg = TrainConfig(epochs=args.epochs, learning_rate=1e-3, time_prior_alpha=alpha, seed=args.seed)
        ncfg = ResidualMLPConfig(task.x_dim, task.theta_dim, conditioning_mode="concat")
        res = train(task, ncfg, tcfg, dataset=ds)
        res.posterior.solver = ODESolverConfig(atol=args.atol, rtol=args.rtol)
        scores = []
        for i in range(args.observations):
            s = res.posterior.sample(xs[i], args.n_samples, seed=args.seed + i)
            scores.append(c2st(s, task.reference_samples(xs[i], args.n_samples, seed=args.seed + i), seed=args.seed))
        rows.append((alpha, float(np.mean(scores)), res.best_epoch))
        reports.append(MetricReport(task.name, -1, f"c2st_mean_alpha_{alpha:g}", float(np.mean(scores)),
                                    args.n_samples, args.n_samples))
    header = ["alpha", "c2st_mean", "best_epoch"]
    print(format_table(rows, header))
    man.add(write_rows_csv(out / "time_prior.csv", header, rows))
    return reports


def cmd_demo(args):
    handlers = {"gaussian-fit": _demo_gaussian_fit, "holes": _demo_holes,
                "lipschitz": _demo_lipschitz, "time-prior": _demo_time_prior}
    if args.name not in handlers:
        raise ConfigError(f"unknown demo {args.name!r}; choose from {', '.join(DEMOS)}")
    out = _out_dir(args.out)
    params = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    man = RunManifest("demo", args.name, args.seed, config_digest(params), out)
    reports = handlers[args.name](args, out, man)
    ledger = out / "metrics.csv"
    if ledger.exists():
        ledger.unlink()
    man.add(append_reports(ledger, reports))
    man.write()
    return 0


def cmd_bench(args):
    from fmpe import kernels
    from fmpe import _kernels_py as py

    out = _out_dir(args.out)
    man = RunManifest("bench", "", args.seed, config_digest({"n": args.n, "repeats": args.repeats}), out)
    rng = np.random.default_rng(args.seed)
    z = rng.standard_normal((args.n, 64))
    a, b = rng.standard_normal((args.n // 4, 2)), rng.standard_normal((args.n // 4, 2))
    backends = {"numpy": py}
    if "compiled" in kernels.available_backends():
        backends["compiled"] = kernels.available_backends()["compiled"]
    rows = []
    for name, mod in backends.items():
        for kernel, call in (("gelu", lambda m: m.gelu(z)), ("sigmoid", lambda m: m.sigmoid(z)),
                             ("rbf_pair_sum", lambda m: m.rbf_pair_sum(a, b, 1.0, False))):
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                call(mod)
                times.append(time.perf_counter() - t0)
            rows.append((kernel, name, min(times)))
    if args.checkpoint:
        posterior, net, meta = load_trained(args.checkpoint, ODESolverConfig(atol=args.atol, rtol=args.rtol))
        x = get_task(meta["task"]).observations()[1][0]
        for mode in ("sample", "sample_and_log_prob"):
            before = posterior.passes
            t0 = time.perf_counter()
            if mode == "sample":
                posterior.sample(x, args.n_flow, seed=args.seed)
            else:
                posterior.sample_and_log_prob(x, args.n_flow, seed=args.seed)
            rows.append((mode, f"passes={posterior.passes - before}", time.perf_counter() - t0))
    print(format_table(rows, ["kernel", "backend", "seconds"]))
    man.add(write_rows_csv(out / "bench.csv", ["kernel", "backend", "seconds"], rows), volatile=True)
    man.write()
    return 0


# ----------------------------------------------------------------------------
# parser


def _common(p, out_default):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--dataset", default=None, help="dataset CSV to reuse (written when missing)")


def _observation_args(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x", default=None, help="observation as comma-separated values")
    p.add_argument("--observation", default=None, help="CSV file whose first data row is x")
    p.add_argument("--obs-index", type=int, default=0, help="fixed task observation to use")


def _solver_args(p, default=1e-7):
    p.add_argument("--atol", type=float, default=default)
    p.add_argument("--rtol", type=float, default=default)


def build_parser():
    parser = argparse.ArgumentParser(prog="fmpe", description="Flow-matching posterior estimation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="simulate a dataset and train a posterior")
    _common(p, "runs/train")
    p.add_argument("--task", required=True)
    p.add_argument("--budget", type=int, default=10_000, help="number of simulations")
    p.add_argument("--net-config", default=None)
    p.add_argument("--path", choices=("ot", "vp"), default=None)
    p.add_argument("--conditioning", choices=("glu", "concat"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="time prior exponent")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw posterior samples")
    _common(p, "runs/sample")
    _observation_args(p)
    _solver_args(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--log-probs", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("logprob", help="evaluate log q(theta | x)")
    _common(p, "runs/logprob")
    _observation_args(p)
    _solver_args(p)
    p.add_argument("--theta", required=True, help="CSV with theta_i columns")
    p.set_defaults(func=cmd_logprob)

    p = sub.add_parser("evaluate", help="compare against reference posteriors")
    _common(p, "runs/evaluate")
    _solver_args(p, 1e-5)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default=None)
    p.add_argument("--metrics", default="c2st")
    p.add_argument("--observations", type=int, default=10)
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--n-coverage", type=int, default=1000)
    p.add_argument("--pp-observations", type=int, default=100)
    p.add_argument("--pp-samples", type=int, default=500)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", help="run a theory or ablation demo")
    _common(p, "runs/demo")
    _solver_args(p, 1e-5)
    p.add_argument("name", help="one of " + ", ".join(DEMOS))
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--m", type=float, default=2.0)
    p.add_argument("--s", type=float, default=0.5)
    p.add_argument("--n-target", type=int, default=100_000)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--budget", type=int, default=10_000)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--observations", type=int, default=10)
    p.add_argument("--n-samples", type=int, default=5000)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("bench", help="time compiled and numpy kernels, and count flow passes")
    _common(p, "runs/bench")
    _solver_args(p, 1e-5)
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--n-flow", type=int, default=1000)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FMPEError as exc:
        print(f"fmpe: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyError as exc:
        print(f"fmpe: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
