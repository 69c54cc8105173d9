"""Command line front end.

Subcommands: synth, pretrain, probe, eval, ablate, report. Exit codes:
0 on success, 1 on runtime failures (bad data, diverged training, missing
files), 2 on usage errors (argparse's convention). The dataset root comes
from --data or the MMSSL_DATA_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "MMSSL_DATA_ROOT"
PROBE_NAME = "probe.npz"


def _data_root(args, parser: argparse.ArgumentParser) -> Path:
    root = args.data or os.environ.get(DATA_ROOT_ENV)
    if not root:
        parser.error(f"no dataset root: pass --data or set {DATA_ROOT_ENV}")
    return Path(root)


def _base_run(args):
    from .config import RunConfig, TrainConfig

    if getattr(args, "config", None):
        run = RunConfig.from_yaml(args.config)
    else:
        run = RunConfig.desk()
    if getattr(args, "seed", None) is not None:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, seed=args.seed))
    if getattr(args, "row", None) is not None:
        from .evaluation import ablation_variant

        tokenizer, masking = ablation_variant(args.row)
        run = dataclasses.replace(run, tokenizer=tokenizer, masking=masking)
    return run


def _load_run_dir(run_dir: Path):
    """Model + config back from a training output directory."""
    from .checkpoint import load_checkpoint
    from .config import RunConfig
    from .trainer import CHECKPOINT_NAME, build_state

    config_path = run_dir / "config.yaml"
    ckpt_path = run_dir / CHECKPOINT_NAME
    if not config_path.exists():
        raise FileNotFoundError(f"{config_path} not found (is {run_dir} a run directory?)")
    if not ckpt_path.exists():
        raise FileNotFoundError(f"{ckpt_path} not found (run pretrain first)")
    run = RunConfig.from_yaml(config_path)
    state = build_state(run)
    load_checkpoint(ckpt_path, state)
    return run, state


def _load_or_fit_probe(run_dir: Path, run, state, records):
    from .evaluation import LinearProbe, fit_probe_on_split

    path = run_dir / PROBE_NAME
    if path.exists():
        with np.load(path) as npz:
            return LinearProbe(weights=npz["weights"], bias=npz["bias"])
    return fit_probe_on_split(state.teacher, records, run.crops)


def cmd_synth(args, parser) -> int:
    from .config import write_provenance
    from .data import save_dataset, synth_generate

    run = _base_run(args)
    if args.subjects is not None:
        run = dataclasses.replace(run, synth=dataclasses.replace(run.synth, n_subjects=args.subjects))
    if args.seed is not None:
        run = dataclasses.replace(run, synth=dataclasses.replace(run.synth, seed=args.seed))
    records = synth_generate(run.synth)
    out = Path(args.out)
    save_dataset(records, out, generator_meta=dataclasses.asdict(run.synth))
    write_provenance(out, run)
    counts: dict[str, int] = {}
    for r in records:
        counts[r.split] = counts.get(r.split, 0) + 1
    print(f"wrote {len(records)} subjects to {out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_pretrain(args, parser) -> int:
    from .config import write_provenance
    from .data import load_dataset
    from .trainer import CHECKPOINT_NAME, pretrain

    run = _base_run(args)
    records = load_dataset(_data_root(args, parser))
    out = Path(args.out)
    resume = out / CHECKPOINT_NAME if args.resume else None
    if resume is not None and not resume.exists():
        raise FileNotFoundError(f"--resume set but {resume} does not exist")
    write_provenance(out, run)
    _, history = pretrain(run, records, out_dir=out, resume_from=resume, max_steps=args.max_steps)
    if history:
        last = history[-1]
        print(
            f"finished at step {last['step']}: total {last['total']:.4f} "
            f"(image {last['image_loss']:.4f}, patch {last['patch_loss']:.4f}, "
            f"supervised {last['supervised_loss']:.4f})"
        )
    else:
        print("no steps to run (checkpoint already at the configured budget)")
    return 0


def cmd_probe(args, parser) -> int:
    from .data import load_dataset
    from .evaluation import fit_probe_on_split

    records = load_dataset(_data_root(args, parser))
    run_dir = Path(args.run)
    run, state = _load_run_dir(run_dir)
    probe = fit_probe_on_split(state.teacher, records, run.crops)
    np.savez(run_dir / PROBE_NAME, weights=probe.weights, bias=probe.bias)
    from .evaluation import extract_features

    train = [r for r in records if r.split == "train" and r.label is not None]
    feats = extract_features(state.teacher, train, run.crops)
    acc = float((probe.predict(feats) == np.array([r.label for r in train])).mean())
    print(f"probe fit on {len(train)} labeled subjects (train accuracy {acc:.3f}), saved to {run_dir / PROBE_NAME}")
    return 0


def cmd_eval(args, parser) -> int:
    from .data import load_dataset
    from .evaluation import evaluate_split, missing_modality_eval

    records = load_dataset(_data_root(args, parser))
    run_dir = Path(args.run)
    run, state = _load_run_dir(run_dir)
    probe = _load_or_fit_probe(run_dir, run, state, records)
    fp = run.fingerprint()

    splits = {"internal": ["test_internal"], "external": ["test_external"]}.get(
        args.split, ["test_internal", "test_external"]
    )
    reports = []
    for split in splits:
        if args.missing:
            rng = np.random.default_rng(args.seed)
            report = missing_modality_eval(
                state.teacher, records, rng, split=split, probe=probe, crop_cfg=run.crops,
                control=args.control, substitute=args.substitute, fingerprint=fp,
            )
            report.flags.append(f"drop seed {args.seed}")
        else:
            report = evaluate_split(state.teacher, probe, records, split, run.crops, fp)
        reports.append(report)
        f1_text = ", ".join(f"{k}={v:.3f}" for k, v in report.f1.items())
        print(f"{report.split}: mcc {report.mcc:.4f}, auroc {report.auroc_macro_ovr:.4f}, f1 {f1_text}")

    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
        print(f"wrote {out}")
    return 0


def cmd_ablate(args, parser) -> int:
    from .config import write_provenance
    from .data import load_dataset
    from .evaluation import render_ablation, run_ablation, write_plots

    run = _base_run(args)
    records = load_dataset(_data_root(args, parser))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_provenance(out, run)
    rows = run_ablation(records, run, out_root=out / "runs")
    (out / "ablation.json").write_text(render_ablation(rows, "json") + "\n")
    (out / "ablation.md").write_text(render_ablation(rows, "md"))
    write_plots(rows, out, metrics_csv=out / "runs" / "row4" / "metrics.csv")
    print(render_ablation(rows, "md"))
    print(f"wrote {out / 'ablation.json'}")
    return 0


def cmd_report(args, parser) -> int:
    from .evaluation import AblationRow, render_ablation, write_plots

    blob = json.loads(Path(args.ablation).read_text())
    rows = [AblationRow.from_dict(d) for d in blob]
    text = render_ablation(rows, args.format)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    if args.plots:
        files = write_plots(rows, args.plots, metrics_csv=args.metrics)
        print(f"wrote {len(files)} plot(s) to {args.plots}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=True):
        if data:
            p.add_argument("--data", help=f"dataset root (default: ${DATA_ROOT_ENV})")
        p.add_argument("--config", help="run config YAML (default: desk preset)")
        p.add_argument("--seed", type=int, help="override the training seed")

    p = sub.add_parser("synth", help="generate and save a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--config", help="run config YAML (its synth section is used)")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.add_argument("--subjects", type=int, help="override the subject count")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="self-distillation training")
    add_common(p)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--row", type=int, choices=(1, 2, 3, 4), help="apply an ablation row variant")
    p.add_argument("--resume", action="store_true", help="resume from the run's last checkpoint")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="fit the linear probe on frozen features")
    p.add_argument("--data", help=f"dataset root (default: ${DATA_ROOT_ENV})")
    p.add_argument("--run", required=True, help="trained run directory")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("eval", help="score test splits, optionally under missing modalities")
    p.add_argument("--data", help=f"dataset root (default: ${DATA_ROOT_ENV})")
    p.add_argument("--run", required=True, help="trained run directory")
    p.add_argument("--split", choices=("internal", "external", "both"), default="both")
    p.add_argument("--out", help="write reports as JSON here")
    p.add_argument("--missing", action="store_true", help="drop one modality per subject")
    p.add_argument("--control", action="store_true", help="missing-modality control arm (no drops)")
    p.add_argument("--substitute", action="store_true", help="mask dropped tokens instead of removing them")
    p.add_argument("--seed", type=int, default=0, help="seed for the per-subject drop choices")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all 4 ablation rows")
    add_common(p)
    p.add_argument("--out", required=True, help="ablation output directory")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render a saved ablation table")
    p.add_argument("--ablation", required=True, help="ablation.json from the ablate command")
    p.add_argument("--format", choices=("md", "csv", "json"), default="md")
    p.add_argument("--out", help="write here instead of stdout")
    p.add_argument("--plots", help="also write plots to this directory")
    p.add_argument("--metrics", help="metrics.csv for the loss-curve plot")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, parser)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 1, usage stays 2
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
