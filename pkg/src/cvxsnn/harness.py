"""Run orchestration behind the CLI.

Artifacts live under ``<output_dir>``:

* ``data-<hash>/<split>.bin``: dataset cache, keyed by the task section and seed;
* ``<variant>-<hash>/``: one training cell (model, solution, dictionary,
  metrics), keyed by everything that influences it.

A directory with a ``run.json`` whose hash matches is complete; re-running it
is a logged no-op.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_dict, resolve_data_path
from .dictionary import build_sampled_dictionary, build_trajectory_dictionary, load_dictionary, save_dictionary
from .metrics import METRIC_FIELDS, SCHEMA_VERSION, MetricsRecord, evaluate, selection_score
from .reconstruct import load_snn, save_snn
from .solver import ConvexProblem, dual_certificate, load_solution, save_solution
from .surrogate import SurrogateConfig, TrainableSnn, load_trainable, save_trainable
from .tasks import (
    ADDITION_SPLITS,
    addition_splits,
    gen_addition_ood,
    load_dataset,
    load_mnist_seq,
    save_dataset,
    xor_splits,
)
from .variants import VariantConfig, VariantResult, run_variant
from .witness import LifArch, WitnessStore

log = logging.getLogger("cvxsnn")

CSV_FIELDS = ("schema_version", "run", "variant", "reg_beta", "lr", "lam_carry") + METRIC_FIELDS
CERT_TOL = 1e-10


class MissingCheckpoint(RuntimeError):
    pass


@dataclass(frozen=True)
class Cell:
    variant: str
    reg_beta: float
    lr: float
    lam_carry: float

    def tag(self) -> dict:
        return asdict(self)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


# -- data --------------------------------------------------------------------


def data_dir(cfg: ExperimentConfig, lam_carry: float) -> Path:
    key = {"task": asdict(cfg.task), "seed": cfg.seed, "lam_carry": lam_carry}
    return Path(cfg.output_dir) / f"data-{_digest(key)}"


def _generate(cfg: ExperimentConfig, lam_carry: float) -> dict:
    t = cfg.task
    if t.name == "addition":
        sizes = t.sizes or ADDITION_SPLITS
        return addition_splits(t.base, t.n_digits, cfg.seed, dict(sizes), lam_sum=t.lam_sum,
                               lam_carry=lam_carry, ramp=t.ramp, loss_kind=t.loss or "softmax")
    if t.name == "xor":
        sizes = {f"n_{k}": v for k, v in t.sizes.items()}
        return xor_splits(t.T, cfg.seed, encoding=t.encoding, loss_kind=t.loss or "squared", **sizes)
    base = Path(cfg.source).parent if cfg.source else None
    n_train = t.sizes.get("train", 5000)
    n_val = t.sizes.get("val", 1000)
    loss = t.loss or "softmax"
    img, lab = resolve_data_path(t.images, base), resolve_data_path(t.labels, base)
    out = {
        "train": load_mnist_seq(img, lab, t.T, n_train, "train", 0, loss),
        "val": load_mnist_seq(img, lab, t.T, n_val, "val", n_train, loss),
    }
    if t.test_images and t.test_labels:
        out["test"] = load_mnist_seq(resolve_data_path(t.test_images, base), resolve_data_path(t.test_labels, base),
                                     t.T, t.sizes.get("test"), "test", 0, loss)
    return out


def gen_data(cfg: ExperimentConfig, lam_carry: float | None = None) -> Path:
    """Write every split once; later calls are no-ops."""
    lam = cfg.task.lam_carry[0] if lam_carry is None else lam_carry
    out = data_dir(cfg, lam)
    done = out / "manifest.json"
    if done.exists():
        log.info("data %s already present", out)
        return out
    out.mkdir(parents=True, exist_ok=True)
    splits = _generate(cfg, lam)
    for name, ds in splits.items():
        save_dataset(ds, out / f"{name}.bin")
    done.write_text(json.dumps({"splits": sorted(splits), "task": asdict(cfg.task), "seed": cfg.seed,
                                "lam_carry": lam}, indent=1))
    log.info("wrote %s (%s)", out, ", ".join(sorted(splits)))
    return out


def load_splits(cfg: ExperimentConfig, lam_carry: float) -> dict:
    out = gen_data(cfg, lam_carry)
    names = json.loads((out / "manifest.json").read_text())["splits"]
    return {name: load_dataset(out / f"{name}.bin") for name in names}


# -- training ----------------------------------------------------------------


def variant_config(cfg: ExperimentConfig, cell: Cell, input_dim: int, T: int):
    sg = SurrogateConfig(slope=cfg.sg.slope, lr=cell.lr, epochs=cfg.sg.epochs, batch_size=cfg.sg.batch_size,
                         seed=cfg.seed, reg=cfg.sg.reg)
    return VariantConfig(LifArch(input_dim, cfg.arch.widths, T), K=cfg.arch.K, M=cfg.witness.M, seed=cfg.seed,
                         leak_mode=cfg.witness.leak_mode, thr_mode=cfg.witness.thr_mode, reg_beta=cell.reg_beta,
                         tol=cfg.solver.tol, max_iter=cfg.solver.max_iter, penalty=cfg.solver.penalty,
                         rule=cfg.solver.rule, sg=sg, finetune_epochs=cfg.sg.finetune_epochs,
                         select_metric=cfg.eval.select_metric)


def _prior_cell(cell: Cell) -> Cell | None:
    if cell.variant in ("sg-cvx", "sg-sg"):
        return Cell("sg", math.nan, cell.lr, cell.lam_carry)
    if cell.variant == "cvx-sg":
        return Cell("cvx", cell.reg_beta, math.nan, cell.lam_carry)
    return None


def _cell_key(cfg: ExperimentConfig, cell: Cell) -> dict:
    d = cfg.to_dict()
    for k in ("output_dir", "workers", "variant", "eval"):
        d.pop(k)
    uses_cvx = cell.variant in ("cvx", "sg-cvx", "cvx-sg")
    uses_sg = cell.variant != "cvx"
    d["task"]["lam_carry"] = cell.lam_carry
    d["solver"]["reg_beta"] = cell.reg_beta if uses_cvx else None
    d["sg"]["lr"] = cell.lr if uses_sg else None
    if not uses_cvx:
        d.pop("solver")
    if not uses_sg:
        d.pop("sg")
    d["eval"] = {"select_metric": cfg.eval.select_metric}
    d["variant"] = cell.variant
    prior = _prior_cell(cell)
    if prior is not None:
        d["prior"] = _cell_key(cfg, prior)
    return d


def run_dir(cfg: ExperimentConfig, cell: Cell) -> Path:
    return Path(cfg.output_dir) / f"{cell.variant}-{_digest(_cell_key(cfg, cell))}"


def _is_complete(path: Path, key_hash: str) -> bool:
    rec = path / "run.json"
    return rec.exists() and json.loads(rec.read_text()).get("hash") == key_hash


def save_model(model, path: Path) -> None:
    if isinstance(model, TrainableSnn):
        save_trainable(model, path)
    else:
        save_snn(model, path)


def load_model(path: Path):
    doc = json.loads(Path(path).read_text())
    if "stage" in doc:
        return load_trainable(path)
    return load_snn(path)


def _load_result(path: Path, variant: str):
    sol = load_solution(path / "solution.json") if (path / "solution.json").exists() else None
    dic = load_dictionary(path / "dictionary.bin") if (path / "dictionary.bin").exists() else None
    return VariantResult(variant, load_model(path / "model.json"), sol, dic)


def train_cell(cfg: ExperimentConfig, cell: Cell, auto_prior: bool = False) -> Path:
    """Train one grid cell into its run directory and return the directory."""
    path = run_dir(cfg, cell)
    key_hash = _digest(_cell_key(cfg, cell))
    if _is_complete(path, key_hash):
        log.info("%s complete (hash %s matches); skipping", path, key_hash)
        return path
    prior = None
    pcell = _prior_cell(cell)
    if pcell is not None:
        ppath = run_dir(cfg, pcell)
        if not _is_complete(ppath, _digest(_cell_key(cfg, pcell))):
            if not auto_prior:
                raise MissingCheckpoint(f"missing prerequisite checkpoint: run {pcell.variant} first ({ppath})")
            train_cell(cfg, pcell, auto_prior)
        prior = _load_result(ppath, pcell.variant)

    data = load_splits(cfg, cell.lam_carry)
    train = data["train"]
    vcfg = variant_config(cfg, cell, train.d, train.T)
    t0 = time.perf_counter()
    res = run_variant(cell.variant, vcfg, data, prior)
    wall = time.perf_counter() - t0

    path.mkdir(parents=True, exist_ok=True)
    save_model(res.model, path / "model.json")
    record = {"hash": key_hash, "cell": cell.tag(), "config": cfg.to_dict(), "wall_time": wall,
              "train_split": "finetune" if cell.variant in ("sg-cvx",) and "finetune" in data else "train"}
    if res.solution is not None and cell.variant in ("cvx", "sg-cvx"):
        save_solution(res.solution, path / "solution.json")
        save_dictionary(res.dictionary, path / "dictionary.bin")
        record.update(primal=res.solution.primal_value, dual=res.solution.dual_value, gap=res.solution.gap,
                      m_last=vcfg.arch.m_last, penalty=vcfg.penalty)
    for name, lg in res.logs.items():
        (path / f"{name}_log.json").write_text(json.dumps({"epochs": lg.epochs, "best_epoch": lg.best_epoch,
                                                           "diverged": lg.diverged}, indent=1))
    rows = []
    for split in ("val", "test"):
        if split in data:
            rec = evaluate(res.model, data[split], "tf", split)
            rec.wall_time = wall
            rec.primal = record.get("primal", math.nan)
            rec.dual = record.get("dual", math.nan)
            rec.gap = record.get("gap", math.nan)
            rows.append(rec)
    write_metrics(path / "metrics.csv", rows, path.name, cell)
    if "val" in data:
        record["val_score"] = float(selection_score(res.model, data["val"], cfg.eval.select_metric))
    # the marker goes last so a crash leaves the directory incomplete
    (path / "run.json").write_text(json.dumps(record, indent=1, default=str))
    log.info("trained %s in %.1fs", path, wall)
    return path


# -- certify / eval ----------------------------------------------------------


def _config_from_record(record: dict, output_dir: str) -> ExperimentConfig:
    raw = dict(record["config"])
    raw["output_dir"] = output_dir
    return config_from_dict(raw, check_files=False)


def certify_run(path, tol: float | None = None) -> dict:
    """Rebuild the dictionary from the stored witnesses and recompute the gap."""
    path = Path(path)
    record = json.loads((path / "run.json").read_text())
    if not (path / "solution.json").exists():
        raise MissingCheckpoint(f"no convex solution in {path}")
    cfg = _config_from_record(record, str(path.parent))
    cell = Cell(**record["cell"])
    data = load_splits(cfg, cell.lam_carry)
    ds = data[record["train_split"]]
    stored = load_dictionary(path / "dictionary.bin")
    arch = LifArch(ds.d, cfg.arch.widths, ds.T)
    store = WitnessStore(stored.witnesses, ["stored"] * len(stored.witnesses), arch)
    build = build_trajectory_dictionary if ds.readout_rule == "per_timestep" else build_sampled_dictionary
    dictionary = build(store, ds.inputs)
    problem = ConvexProblem(dictionary, ds.Y, cell.reg_beta, record["m_last"], ds.loss_spec("mean"),
                            penalty=record["penalty"])
    sol = load_solution(path / "solution.json")
    cert = dual_certificate(problem, sol.w_tilde)
    tol = cfg.solver.tol if tol is None else tol
    out = {
        "run": path.name,
        "dictionary_match": bool(np.array_equal(dictionary.words, stored.words)),
        "problem_hash_match": problem.hash() == sol.problem_hash,
        "primal": cert.primal_value,
        "dual": cert.dual_value,
        "gap": cert.gap,
        "stored_gap": sol.gap,
        "reproduced": abs(cert.gap - sol.gap) <= CERT_TOL,
        "tol": tol,
    }
    out["certified"] = bool(out["dictionary_match"] and out["reproduced"] and cert.gap <= tol)
    return out


def eval_run(path, mode: str = "tf", ood_lengths=(), n_ood: int = 1024) -> list:
    path = Path(path)
    record = json.loads((path / "run.json").read_text())
    cfg = _config_from_record(record, str(path.parent))
    cell = Cell(**record["cell"])
    model = load_model(path / "model.json")
    data = load_splits(cfg, cell.lam_carry)
    rows = []
    for split in ("val", "test"):
        if split in data:
            rows.append(evaluate(model, data[split], mode, split))
    if ood_lengths and cfg.task.name != "addition":
        raise ValueError("length-OOD evaluation requires the addition task")
    for nd in ood_lengths:
        ds = gen_addition_ood(cfg.task.base, int(nd), n_ood, cfg.seed, lam_sum=cfg.task.lam_sum,
                              lam_carry=cell.lam_carry, ramp=False, loss_kind=cfg.task.loss or "softmax")
        rows.append(evaluate(model, ds, mode, f"ood{nd}"))
    write_metrics(path / f"eval_{mode}.csv", rows, path.name, cell)
    return rows


# -- metrics output ----------------------------------------------------------


def write_metrics(path: Path, rows, run: str, cell: Cell, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        if new:
            w.writeheader()
        for r in rows:
            d = r.row() if isinstance(r, MetricsRecord) else dict(r)
            d.update(schema_version=SCHEMA_VERSION, run=run, variant=cell.variant, reg_beta=cell.reg_beta,
                     lr=cell.lr, lam_carry=cell.lam_carry)
            w.writerow(d)


def write_dat(path: Path, series: dict, xlabel: str, ylabel: str) -> None:
    """gnuplot-style blocks, one per series, separated by two blank lines."""
    lines = [f"# x={xlabel} y={ylabel}"]
    for name, pts in series.items():
        lines.append(f"# series {name}")
        lines += [f"{x:.10g} {y:.10g}" for x, y in pts]
        lines += ["", ""]
    Path(path).write_text("\n".join(lines))


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def write_svg(path: Path, series: dict, xlabel: str, ylabel: str, logx: bool = True,
              size=(480, 320)) -> None:
    """Minimal line plot; no dependencies beyond string formatting."""
    W, H = size
    m = 48
    pts = [(math.log10(x) if logx else x, y) for s in series.values() for x, y in s if not (logx and x <= 0)]
    if not pts:
        Path(path).write_text(f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}"/>')
        return
    xs, ys = zip(*pts)
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(x):
        return m + (x - x0) / (x1 - x0) * (W - 2 * m)

    def sy(y):
        return H - m - (y - y0) / (y1 - y0) * (H - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
           f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{xlabel}</text>',
           f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" text-anchor="middle">{ylabel}</text>',
           f'<text x="{m}" y="{H - m + 14}" text-anchor="middle">{x0:.3g}</text>',
           f'<text x="{W - m}" y="{H - m + 14}" text-anchor="middle">{x1:.3g}</text>',
           f'<text x="{m - 4}" y="{H - m}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{m - 4}" y="{m + 4}" text-anchor="end">{y1:.3g}</text>']
    for i, (name, s) in enumerate(series.items()):
        c = _COLORS[i % len(_COLORS)]
        p = sorted((math.log10(x) if logx else x, y) for x, y in s if not (logx and x <= 0))
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in p)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{coords}"/>')
        out += [f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{c}"/>' for x, y in p]
        out.append(f'<text x="{W - m + 4}" y="{m + 14 * i}" fill="{c}">{name}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out))


# -- sweep -------------------------------------------------------------------


def sweep_cells(cfg: ExperimentConfig, variant: str | None = None) -> list:
    variant = variant or cfg.variant
    regs = cfg.solver.reg_beta if variant in ("cvx", "sg-cvx", "cvx-sg") else (math.nan,)
    lrs = cfg.sg.lr if variant != "cvx" else (math.nan,)
    lams = cfg.task.lam_carry if cfg.task.name == "addition" else (cfg.task.lam_carry[0],)
    return [Cell(variant, float(r), float(l), float(c)) for c, r, l in itertools.product(lams, regs, lrs)]


def select_best(results: list) -> dict:
    """Highest validation score; ties go to smaller reg_beta, then smaller lr."""
    def key(r):
        reg = r["reg_beta"] if not math.isnan(r["reg_beta"]) else 0.0
        lr = r["lr"] if not math.isnan(r["lr"]) else 0.0
        return (-r["val_score"], reg, lr)
    return min(results, key=key)


def _sweep_worker(args):
    cfg, cell = args
    path = train_cell(cfg, cell, auto_prior=True)
    rec = json.loads((path / "run.json").read_text())
    return {**cell.tag(), "run": path.name, "val_score": rec.get("val_score", math.nan),
            "gap": rec.get("gap", math.nan)}


def sweep(cfg: ExperimentConfig, variant: str | None = None) -> dict:
    cells = sweep_cells(cfg, variant)
    for lam in sorted({c.lam_carry for c in cells}):
        gen_data(cfg, lam)
    jobs = [(cfg, c) for c in cells]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    out = Path(cfg.output_dir) / f"sweep-{cells[0].variant}-{_digest(cfg.digest())}"
    out.mkdir(parents=True, exist_ok=True)
    # single writer: results are collected first, then written here
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["run", "variant", "reg_beta", "lr", "lam_carry", "val_score", "gap"])
        w.writeheader()
        w.writerows(results)
    best = select_best(results)
    (out / "best.json").write_text(json.dumps(best, indent=1))
    series = {}
    use_reg = cells[0].variant in ("cvx", "sg-cvx", "cvx-sg")
    for r in results:
        name = f"lr={r['lr']:g} lam={r['lam_carry']:g}" if use_reg else f"lam={r['lam_carry']:g}"
        x = r["reg_beta"] if use_reg else r["lr"]
        series.setdefault(name, []).append((x, r["val_score"]))
    xlabel = "reg_beta" if use_reg else "lr"
    write_dat(out / "sweep.dat", series, xlabel, "val score")
    write_svg(out / "sweep.svg", series, xlabel, "val score")
    log.info("best cell %s (val %.4f)", best["run"], best["val_score"])
    return {"dir": str(out), "best": best, "results": results}
