"""Command-line entry point: ``diffiqt <command> [--config ...] [--seed ...] [--out ...]``.

Commands share one output directory laid out as::

    corpus.json          phantom manifest (paths, checksums, split)
    hf/ lf/ lf_slices/   high-field, low-field and acquired-slice volumes
    simulate.json        HF/LF pairing with per-volume PSNR(LF, HF)
    model.iqtc           trained checkpoint, with train_log.jsonl
    enhanced/ baseline/  test-split outputs, with enhance.json
    metrics.json         enhanced and baseline scores against HF
    ablation.json/.md    three-row module ablation

Each command also writes ``resolved_config.<command>.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_run_config
from .denoiser import build_denoiser, count_parameters
from .errors import InputError, RunAbort
from .metrics import evaluate_pairs, jsonable, psnr
from .patching import make_grid
from .sampling import sample_with_checkpoint
from .schedule import NoiseSchedule
from .simulator import decimate, degrade_slices, interpolation_baseline
from .training import fit, gradient_check
from .volume import generate_phantom, load_volume, model_frame, normalize, save_volume

log = logging.getLogger("diffiqt")

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 2, 3


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, data) -> None:
    # infinities are written as the strings "inf"/"-inf" rather than non-standard JSON
    path.write_text(json.dumps(jsonable(data), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_json(path: Path, hint: str) -> dict:
    if not path.exists():
        raise InputError(f"{path} not found; run `diffiqt {hint}` first")
    return json.loads(path.read_text())


def _name(i: int) -> str:
    return f"vol_{i:03d}"


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    """Train/val/test counts; rounding leftovers go to the training split."""
    val = int(round(n * fractions[1]))
    test = int(round(n * fractions[2]))
    return n - val - test, val, test


class Run:
    """Paths and config for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def resolve(self, rel: str) -> Path:
        return self.out / rel

    def record_config(self, command: str) -> None:
        self.path(f"resolved_config.{command}.json").write_text(dump_config(self.cfg) + "\n")

    def corpus(self) -> dict:
        return _read_json(self.out / "corpus.json", "phantom")

    def pairs(self) -> dict:
        return _read_json(self.out / "simulate.json", "simulate")

    def split_pairs(self, split: str):
        names = self.corpus()["split"][split]
        by_name = {p["name"]: p for p in self.pairs()["pairs"]}
        return [by_name[n] for n in names]

    def load_pair(self, entry):
        return load_volume(self.resolve(entry["hf"])), load_volume(self.resolve(entry["lf"]))


# -- commands ---------------------------------------------------------------------


def cmd_phantom(run: Run) -> dict:
    cfg = run.cfg
    n = cfg.corpus.n_volumes
    volumes = []
    for i in range(n):
        spec = cfg.corpus.phantom.model_copy(update={"seed": cfg.seed + i})
        v = normalize(generate_phantom(spec))
        rel = f"hf/{_name(i)}.iqtv"
        save_volume(v, run.path(rel))
        volumes.append({"name": _name(i), "path": rel, "seed": spec.seed, "sha256": sha256(run.resolve(rel))})
    n_train, n_val, _ = split_counts(n, cfg.corpus.split)
    names = [v["name"] for v in volumes]
    manifest = {
        "volumes": volumes,
        "split": {"train": names[:n_train], "val": names[n_train : n_train + n_val], "test": names[n_train + n_val :]},
        "split_fractions": list(cfg.corpus.split),
        "phantom": cfg.corpus.phantom.model_dump(mode="json"),
    }
    _write_json(run.path("corpus.json"), manifest)
    return manifest


def cmd_simulate(run: Run) -> dict:
    cfg = run.cfg
    pairs = []
    for i, entry in enumerate(run.corpus()["volumes"]):
        hf = load_volume(run.resolve(entry["path"]))
        spec = cfg.decimation.model_copy(update={"seed": cfg.decimation.seed + cfg.seed + 1000 + i})
        lf = decimate(hf, spec)
        slices = degrade_slices(hf, spec)
        lf_rel, sl_rel = f"lf/{entry['name']}.iqtv", f"lf_slices/{entry['name']}.iqtv"
        save_volume(lf, run.path(lf_rel))
        save_volume(slices, run.path(sl_rel))
        pairs.append(
            {
                "name": entry["name"],
                "hf": entry["path"],
                "lf": lf_rel,
                "lf_slices": sl_rel,
                "decimation_seed": spec.seed,
                "sha256": {"lf": sha256(run.resolve(lf_rel)), "lf_slices": sha256(run.resolve(sl_rel))},
                "psnr_lf_hf": psnr(lf, hf, cfg.metrics.data_range),
            }
        )
    manifest = {"factor": cfg.decimation.factor, "slice_axis": cfg.decimation.slice_axis, "pairs": pairs}
    _write_json(run.path("simulate.json"), manifest)
    return manifest


def cmd_train(run: Run) -> dict:
    cfg = run.cfg
    train = [run.load_pair(p) for p in run.split_pairs("train")]
    val = [run.load_pair(p) for p in run.split_pairs("val")]
    log_path = run.path("train_log.jsonl")
    log_path.unlink(missing_ok=True)
    start = time.perf_counter()
    ckpt = fit(train, cfg.denoiser, cfg.train, NoiseSchedule(), validation=val, manifest=log_path)
    save_checkpoint(ckpt, run.path("model.iqtc"))
    history = ckpt.extra["train_loss_history"]
    summary = {
        "checkpoint": "model.iqtc",
        "steps": ckpt.step,
        "seconds": round(time.perf_counter() - start, 3),
        "parameters": int(sum(p.size for p in ckpt.params.values())),
        "first_100_median": float(np.median(history[:100])) if history else None,
        "last_100_median": float(np.median(history[-100:])) if history else None,
    }
    _write_json(run.path("train.json"), summary)
    return summary


def _baseline(run: Run, entry, dims) -> object:
    dec = run.cfg.decimation
    slices = load_volume(run.resolve(entry["lf_slices"]))
    return interpolation_baseline(slices, dec.factor, dec.slice_axis, dims[dec.slice_axis])


def cmd_enhance(run: Run, split: str = "test") -> dict:
    cfg = run.cfg
    ckpt = load_checkpoint(run.resolve("model.iqtc"), expect=cfg.denoiser)
    rows = []
    for entry in run.split_pairs(split):
        hf, lf = run.load_pair(entry)
        start = time.perf_counter()
        out = sample_with_checkpoint(model_frame(lf), ckpt, cfg.sampler, NoiseSchedule())
        enh_rel, base_rel = f"enhanced/{entry['name']}.iqtv", f"baseline/{entry['name']}.iqtv"
        save_volume(out, run.path(enh_rel))
        save_volume(_baseline(run, entry, hf.dims), run.path(base_rel))
        rows.append(
            {"name": entry["name"], "enhanced": enh_rel, "baseline": base_rel, "hf": entry["hf"],
             "seconds": round(time.perf_counter() - start, 3)}
        )
    summary = {"split": split, "checkpoint_step": ckpt.step, "sampler": cfg.sampler.model_dump(mode="json"),
               "volumes": rows}
    _write_json(run.path("enhance.json"), summary)
    return summary


def cmd_evaluate(run: Run, pred: Optional[str] = None, ref: Optional[str] = None) -> dict:
    m = run.cfg.metrics
    if pred is not None or ref is not None:
        if pred is None or ref is None:
            raise InputError("--pred and --ref must be given together")
        p, r = load_volume(pred), load_volume(ref)
        report = evaluate_pairs([(p, r)], m.data_range, m.scales, names=[Path(pred).name],
                                provenance={"pred": str(pred), "ref": str(ref)})
        result = {"pair": report.to_dict()}
    else:
        rows = _read_json(run.out / "enhance.json", "enhance")["volumes"]
        refs = [load_volume(run.resolve(r["hf"])) for r in rows]
        grid = make_grid(refs[0].dims, run.cfg.denoiser.patch_size) if refs else None
        names = [r["name"] for r in rows]
        result = {}
        for key in ("enhanced", "baseline"):
            preds = [load_volume(run.resolve(r[key])) for r in rows]
            report = evaluate_pairs(list(zip(preds, refs)), m.data_range, m.scales, grid, names,
                                    provenance={"source": key})
            result[key] = report.to_dict()
    _write_json(run.path("metrics.json"), result)
    return result


def cmd_gradcheck(run: Run) -> dict:
    report = gradient_check(seed=run.cfg.seed)
    result = {"max_rel_error": report.max_rel_error, "n_checked": report.n_checked, "worst": report.worst,
              "entries": report.entries}
    _write_json(run.path("gradcheck.json"), result)
    return result


ABLATION_ROWS = (("off", "off"), ("on", "off"), ("on", "on"))


def cmd_ablation(run: Run) -> dict:
    cfg = run.cfg
    train = [run.load_pair(p) for p in run.split_pairs("train")]
    tests = [(entry, run.load_pair(entry)) for entry in run.split_pairs("test")]
    tcfg = cfg.train.model_copy(update={"steps": cfg.ablation.steps})
    rows = []
    for dfe, cb in ABLATION_ROWS:
        dcfg = cfg.denoiser.model_copy(
            update={"dfe_depth": cfg.ablation.dfe_depth if dfe == "on" else 0, "cross_batch": cb == "on"}
        )
        # re-validate the geometry of the modified config
        dcfg = type(dcfg).model_validate(dcfg.model_dump())
        start = time.perf_counter()
        ckpt = fit(train, dcfg, tcfg, NoiseSchedule())
        pairs = [(sample_with_checkpoint(model_frame(lf), ckpt, cfg.sampler), hf) for _, (hf, lf) in tests]
        grid = make_grid(pairs[0][1].dims, dcfg.patch_size) if pairs else None
        report = evaluate_pairs(pairs, cfg.metrics.data_range, cfg.metrics.scales, grid,
                                [e["name"] for e, _ in tests])
        rows.append(
            {
                "dfe": dfe,
                "cross_batch": cb,
                "parameters": count_parameters(build_denoiser(dcfg)),
                "psnr_db": report.psnr_db,
                "mssim": report.mssim,
                "seam_score": report.seam_score,
                "seconds": round(time.perf_counter() - start, 3),
            }
        )
    result = {"steps": cfg.ablation.steps, "rows": rows}
    _write_json(run.path("ablation.json"), result)
    run.path("ablation.md").write_text(render_ablation(rows))
    return result


def render_ablation(rows) -> str:
    head = "| DFE | Cross-batch | Params | PSNR (dB) | MSSIM | Seam score |\n"
    head += "|:---:|:---:|---:|---:|---:|---:|\n"
    body = "".join(
        f"| {r['dfe']} | {r['cross_batch']} | {r['parameters']:,} | {r['psnr_db']:.2f} | {r['mssim']:.4f} "
        f"| {r['seam_score']:.3f} |\n"
        for r in rows
    )
    return head + body


def cmd_run(run: Run) -> dict:
    """phantom -> simulate -> train -> enhance -> evaluate."""
    cmd_phantom(run)
    cmd_simulate(run)
    train = cmd_train(run)
    cmd_enhance(run)
    return {"train": train, "metrics": cmd_evaluate(run)}


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-path override, e.g. train.steps=500 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="diffiqt", description="Diffusion-based image quality transfer on 3D volumes.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="generate the synthetic HF corpus")
    sub.add_parser("simulate", parents=[common], help="degrade HF volumes into LF volumes")
    sub.add_parser("train", parents=[common], help="train the denoiser on the training split")
    enh = sub.add_parser("enhance", parents=[common], help="enhance a split and write the interpolation baseline")
    enh.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev = sub.add_parser("evaluate", parents=[common], help="score enhanced and baseline volumes against HF")
    ev.add_argument("--pred", help="score a single volume file instead of the run outputs")
    ev.add_argument("--ref", help="reference volume for --pred")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the network gradients")
    sub.add_parser("ablation", parents=[common], help="three-row module ablation report")
    sub.add_parser("run", parents=[common], help="phantom, simulate, train, enhance and evaluate")
    return parser


def _summary(command: str, result: dict) -> str:
    if command == "evaluate":
        parts = []
        for key, rep in result.items():
            parts.append(f"{key}: PSNR {rep['psnr_db']} dB, MSSIM {rep['mssim']}")
        return "; ".join(parts)
    if command == "run":
        return _summary("evaluate", result["metrics"])
    if command == "gradcheck":
        return f"max relative error {result['worst']:.3e}"
    if command == "ablation":
        return "\n" + render_ablation(result["rows"])
    return "done"


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("IQT_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    try:
        cfg = load_run_config(args.config, args.override, args.seed, args.out)
        run = Run(cfg)
        run.record_config(args.command)
        if args.command == "enhance":
            result = cmd_enhance(run, args.split)
        elif args.command == "evaluate":
            result = cmd_evaluate(run, args.pred, args.ref)
        else:
            result = COMMANDS[args.command](run)
    except (InputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except RunAbort as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    print(f"{args.command}: {_summary(args.command, result)}")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "ablation": cmd_ablation,
    "run": cmd_run,
}


if __name__ == "__main__":
    sys.exit(main())
