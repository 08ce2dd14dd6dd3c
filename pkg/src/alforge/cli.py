"""Experiment harness: ``alforge <subcommand> --config <path> [options]``.

Subcommands cover each pipeline stage (make-toy, train-ae, train-cgan,
generate, score) plus the full loop (run) and the paired
uncertainty-vs-random benchmark (compare). Configs are plain ``key = value``
text with ``#`` comments; unknown keys are rejected before any work starts.
Failures exit nonzero with a single machine-parseable line
``ERROR <CATEGORY>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import alloop, cgan, core, maskops, models
from .core import DatasetManifest, ExperimentConfig
from .errors import AlforgeError, ConfigError, DataError
from .metrics import EvalReport, FeatureExtractor
from .rng import RngStream

_EXIT_CODES = {"CONFIG": 2, "DATA": 3, "TRAIN": 4, "DIVERGE": 5, "POOL_EXHAUSTED": 6}

_CLI_KEYS = {
    "data_root": str,
    "output_dir": str,
    "checkpoint_dir": str,
    "acquisition": str,
    "tasks": str,
    "compare_seeds": str,
    "toy_train_per_class": int,
    "toy_test_per_class": int,
    "score_manifest": str,
    "classifier_checkpoint": str,
}


@dataclass
class RunConfig:
    """Parsed config file: experiment knobs plus paths and mode flags."""

    experiment: ExperimentConfig
    data_root: Path
    output_dir: Path
    checkpoint_dir: Path
    acquisition: str = "uncertainty"
    tasks: tuple[str, ...] = ("classification",)
    compare_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    toy_train_per_class: int = 216
    toy_test_per_class: int = 200
    score_manifest: Path | None = None
    classifier_checkpoint: Path | None = None

    @property
    def manifest_path(self) -> Path:
        return self.data_root / "manifest.csv"


def _experiment_converters() -> dict:
    convert = {}
    for f in fields(ExperimentConfig):
        t = str(f.type)
        if t == "int":
            convert[f.name] = int
        elif t == "float":
            convert[f.name] = float
        elif t == "int | None":
            convert[f.name] = lambda v: None if v.lower() == "none" else int(v)
        elif t == "tuple[int, int]":
            convert[f.name] = lambda v: tuple(int(p) for p in v.lower().split("x"))
        else:
            raise AssertionError(f"unhandled config field type {t}")
    return convert


_EXPERIMENT_CONVERTERS = _experiment_converters()


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"{source} line {lineno}: duplicate key {key!r}")
        raw[key] = value

    exp_kwargs = {}
    cli_kwargs = {}
    for key, value in raw.items():
        if key in _EXPERIMENT_CONVERTERS:
            try:
                exp_kwargs[key] = _EXPERIMENT_CONVERTERS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {exc}")
        elif key in _CLI_KEYS:
            cli_kwargs[key] = value
        else:
            raise ConfigError(f"{source}: unknown key {key!r}")

    for required in ("data_root", "output_dir"):
        if required not in cli_kwargs:
            raise ConfigError(f"{source}: missing required key {required!r}")

    experiment = ExperimentConfig(**exp_kwargs)
    out = Path(cli_kwargs.pop("output_dir"))
    rc = RunConfig(
        experiment=experiment,
        data_root=Path(cli_kwargs.pop("data_root")),
        output_dir=out,
        checkpoint_dir=Path(cli_kwargs.pop("checkpoint_dir", out / "models")),
    )
    if "acquisition" in cli_kwargs:
        rc.acquisition = cli_kwargs.pop("acquisition")
        if rc.acquisition not in alloop.ACQUISITIONS:
            raise ConfigError(f"unknown acquisition {rc.acquisition!r}")
    if "tasks" in cli_kwargs:
        tasks = tuple(t.strip() for t in cli_kwargs.pop("tasks").split(",") if t.strip())
        unknown = set(tasks) - set(alloop.TASKS)
        if unknown:
            raise ConfigError(f"unknown tasks {sorted(unknown)}")
        rc.tasks = tasks
    if "compare_seeds" in cli_kwargs:
        try:
            rc.compare_seeds = tuple(
                int(s) for s in cli_kwargs.pop("compare_seeds").split(",") if s.strip()
            )
        except ValueError as exc:
            raise ConfigError(f"bad compare_seeds: {exc}")
    for key in ("toy_train_per_class", "toy_test_per_class"):
        if key in cli_kwargs:
            setattr(rc, key, int(cli_kwargs.pop(key)))
    if "score_manifest" in cli_kwargs:
        rc.score_manifest = Path(cli_kwargs.pop("score_manifest"))
    if "classifier_checkpoint" in cli_kwargs:
        rc.classifier_checkpoint = Path(cli_kwargs.pop("classifier_checkpoint"))
    return rc


def load_config(path: Path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    rc = parse_config_text(path.read_text(), source=str(path))
    if seed_override is not None:
        from dataclasses import replace

        rc.experiment = replace(rc.experiment, seed=seed_override)
    return rc


# ---------------------------------------------------------------------------
# locking and idempotency


class DirLock:
    """Reject concurrent invocations against one output directory."""

    def __init__(self, directory: Path, force: bool = False):
        directory.mkdir(parents=True, exist_ok=True)
        self.path = directory / ".alforge.lock"
        if force and self.path.exists():
            self.path.unlink()
        self.fd = None
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(self.fd, str(os.getpid()).encode())
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another invocation "
                f"({self.path}); rerun with --force if it is stale"
            )

    def release(self):
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
        if self.path.exists():
            self.path.unlink()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


def _skip_if_done(artifacts, force: bool, what: str) -> bool:
    """True when all artifacts already exist and --force was not given."""
    paths = [Path(p) for p in artifacts]
    if not force and paths and all(p.exists() for p in paths):
        print(f"{what}: outputs already present, skipping (use --force to redo)")
        return True
    return False


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_toy(rc: RunConfig, args) -> int:
    with DirLock(rc.data_root, args.force):
        if _skip_if_done([rc.manifest_path], args.force, "make-toy"):
            return 0
        manifest = core.make_toy_dataset(
            rc.data_root,
            rc.toy_train_per_class,
            rc.experiment.image_size,
            RngStream(rc.experiment.seed, "toy"),
            n_test_per_class=rc.toy_test_per_class,
        )
        for split in ("train", "test"):
            print(f"{split}: {manifest.class_counts(split)}")
    return 0


def _load_manifest(rc: RunConfig) -> DatasetManifest:
    return core.load_manifest(rc.manifest_path)


def cmd_train_ae(rc: RunConfig, args) -> int:
    with DirLock(rc.output_dir, args.force):
        out = rc.checkpoint_dir / "mask_ae.ckpt"
        if _skip_if_done([out], args.force, "train-ae"):
            return 0
        manifest = _load_manifest(rc)
        samples = core.load_samples(manifest, "train")
        ae = cgan.train_autoencoder(
            np.stack([s.mask for s in samples]),
            rc.experiment,
            random_state=RngStream(rc.experiment.seed, "cli/ae").torch_seed() % (2**31),
        )
        ae.save(out)
        print(f"mask autoencoder saved to {out} (holdout accuracy {ae.holdout_accuracy_:.4f})")
    return 0


def cmd_train_cgan(rc: RunConfig, args) -> int:
    with DirLock(rc.output_dir, args.force):
        out = rc.checkpoint_dir / "cgan.ckpt"
        feat_out = rc.checkpoint_dir / "feature_extractor.ckpt"
        history_out = rc.output_dir / "gan_history.csv"
        if _skip_if_done([out, feat_out, history_out], args.force, "train-cgan"):
            return 0
        ae_path = rc.checkpoint_dir / "mask_ae.ckpt"
        if not ae_path.exists():
            raise DataError(f"missing checkpoint {ae_path}; run train-ae first")
        ae = cgan.MaskAutoencoder.load(ae_path)
        manifest = _load_manifest(rc)
        samples = core.load_samples(manifest, "train")
        root = RngStream(rc.experiment.seed, "cli/cgan")
        feat = FeatureExtractor(
            channels=rc.experiment.feature_channels,
            steps=rc.experiment.backbone_steps,
            learning_rate=rc.experiment.learning_rate,
            batch_size=rc.experiment.effective_batch_size,
            random_state=root.child("feat").torch_seed() % (2**31),
        ).fit(
            np.stack([s.pixels for s in samples]),
            np.array([1 if s.label == "nodule" else 0 for s in samples]),
        )
        gan = cgan.train_cgan(samples, ae, feat, rc.experiment, root)
        feat.save(feat_out)
        gan.save(out)
        rows = ["step,d_loss,g_adv,g_l1,g_content,g_total"]
        rows += [
            f"{h['step']},{h['d_loss']:.6f},{h['g_adv']:.6f},{h['g_l1']:.6f},"
            f"{h['g_content']:.6f},{h['g_total']:.6f}"
            for h in gan.history_
        ]
        history_out.write_text("\n".join(rows) + "\n")
        print(f"cGAN saved to {out}; loss history in {history_out}")
    return 0


def cmd_generate(rc: RunConfig, args) -> int:
    with DirLock(rc.output_dir, args.force):
        out_dir = rc.output_dir / "synthetic"
        done = out_dir / "synthetic_manifest.csv"
        if _skip_if_done([done], args.force, "generate"):
            return 0
        ae_path = rc.checkpoint_dir / "mask_ae.ckpt"
        gan_path = rc.checkpoint_dir / "cgan.ckpt"
        for path in (ae_path, gan_path):
            if not path.exists():
                raise DataError(f"missing checkpoint {path}; train the models first")
        ae = cgan.MaskAutoencoder.load(ae_path)
        gan = cgan.ConditionalGan.load(gan_path)
        manifest = _load_manifest(rc)
        root = RngStream(rc.experiment.seed, "cli/generate")
        records = []
        for sample in core.load_samples(manifest, "train"):
            perturbs = maskops.generate_perturbations(
                sample, rc.experiment.synth_per_image, rc.experiment, root.child(sample.id)
            )
            for i, (mask, spec) in enumerate(perturbs):
                child = cgan.synthesize(
                    gan, sample, mask, ae, spec=spec,
                    sample_id=f"syn_{sample.id}_{i:03d}",
                )
                img_path, mask_path = core.save_sample(child, out_dir / "images")
                records.append(
                    core.ManifestRecord(
                        str(img_path.relative_to(out_dir)),
                        str(mask_path.relative_to(out_dir)),
                        child.label,
                        "train",
                    )
                )
        core.write_manifest(records, done)
        print(f"wrote {len(records)} synthetic samples under {out_dir}")
    return 0


def cmd_score(rc: RunConfig, args) -> int:
    with DirLock(rc.output_dir, args.force):
        out = rc.output_dir / "uncertainty.csv"
        if _skip_if_done([out], args.force, "score"):
            return 0
        clf_path = rc.classifier_checkpoint or (rc.checkpoint_dir / "classifier.ckpt")
        if not clf_path.exists():
            raise DataError(f"missing checkpoint {clf_path}; run the loop first")
        model = models.load_classifier(clf_path)
        manifest_path = rc.score_manifest or rc.manifest_path
        manifest = core.load_manifest(manifest_path)
        samples = core.load_samples(manifest, "train")
        root = RngStream(rc.experiment.seed, "cli/score")
        lines = ["sample_id,total,epistemic,aleatoric"]
        for sample in samples:
            mc = models.mc_forward(model, sample.pixels, rc.experiment.t_mc, root.child(sample.id))
            score = models.predictive_uncertainty(mc)
            lines.append(
                f"{sample.id},{score.total:.8f},{score.epistemic:.8f},{score.aleatoric:.8f}"
            )
        out.write_text("\n".join(lines) + "\n")
        print(f"wrote uncertainty dump for {len(samples)} samples to {out}")
    return 0


def cmd_run(rc: RunConfig, args) -> int:
    with DirLock(rc.output_dir, args.force):
        summary_path = rc.output_dir / "summary.json"
        if not args.resume and not args.force and summary_path.exists():
            summary = json.loads(summary_path.read_text())
            if summary.get("stopped"):
                print("run: already complete, skipping (use --force to redo)")
                return 0
        manifest = _load_manifest(rc)
        prep = alloop.prepare_experiment(rc.experiment, manifest)

        ckpt_dir = rc.output_dir / "checkpoints"
        latest = _latest_checkpoint(ckpt_dir) if args.resume else None
        if latest is not None:
            runner = alloop.ALRunner.resume(prep, latest, out_dir=rc.output_dir)
            print(f"resumed from {latest} at round {runner.state.round}")
        else:
            runner = alloop.ALRunner(
                prep, acquisition=rc.acquisition, tasks=rc.tasks, out_dir=rc.output_dir
            )
        state = runner.run()

        models.save_classifier(runner.classifier, rc.checkpoint_dir / "classifier.ckpt")
        print(f"stopped after round {state.round} ({state.stop_reason})")
        for row in state.metric_history:
            print(f"round {row['round']}: {EvalReport.from_dict(row).human()}")
    return 0


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    if not ckpt_dir.exists():
        return None
    rounds = sorted(p for p in ckpt_dir.glob("round_*.ckpt") if "error" not in p.name)
    return rounds[-1] if rounds else None


def cmd_compare(rc: RunConfig, args) -> int:
    with DirLock(rc.output_dir, args.force):
        curves_path = rc.output_dir / "curves.csv"
        summary_path = rc.output_dir / "compare_summary.json"
        plot_path = rc.output_dir / "compare.png"
        if _skip_if_done([curves_path, summary_path, plot_path], args.force, "compare"):
            return 0
        manifest = _load_manifest(rc)
        result = alloop.compare_acquisitions(
            rc.experiment, manifest, rc.compare_seeds, tasks=rc.tasks
        )

        lines = ["acquisition,seed,round,labeled_fraction,auc"]
        for acq, per_seed in result["curves"].items():
            for seed, points in zip(rc.compare_seeds, per_seed):
                for p in points:
                    lines.append(
                        f"{acq},{seed},{p['round']},{p['labeled_fraction']:.6f},{p['auc']:.6f}"
                    )
        curves_path.write_text("\n".join(lines) + "\n")

        verdict = compare_verdict(result)
        summary = {
            "mean_curves": result["mean_curves"],
            "full_auc_mean": result["full_auc_mean"],
            "full_aucs": result["full_aucs"],
            "seeds": list(rc.compare_seeds),
            **verdict,
        }
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
        _write_compare_plot(result, plot_path)
        print(
            f"uncertainty > random at {verdict['strict_wins']}/{verdict['compared_points']} "
            f"fractions (min margin {verdict['min_margin']:.4f}); "
            f"criterion {'PASS' if verdict['passes'] else 'FAIL'}"
        )
    return 0


def compare_verdict(result: dict) -> dict:
    """The paired-curve criterion: uncertainty within 0.02 of random
    everywhere and strictly better at >= 60% of the measured fractions.

    Round 0 is the shared pre-loop baseline and is excluded from the strict
    comparison."""
    unc = result["mean_curves"]["uncertainty"]
    rnd = result["mean_curves"]["random"]
    points = min(len(unc), len(rnd))
    margins = [unc[r]["auc"] - rnd[r]["auc"] for r in range(1, points)]
    strict = sum(1 for m in margins if m > 0)
    passes = bool(
        margins
        and min(margins) >= -0.02
        and strict >= int(np.ceil(0.6 * len(margins)))
    )
    return {
        "compared_points": len(margins),
        "strict_wins": strict,
        "min_margin": float(min(margins)) if margins else float("nan"),
        "passes": passes,
    }


def _write_compare_plot(result: dict, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    styles = {"uncertainty": "o-", "random": "s--"}
    for acq, rows in result["mean_curves"].items():
        ax.plot(
            [r["labeled_fraction"] for r in rows],
            [r["auc"] for r in rows],
            styles[acq],
            label=acq,
        )
    ax.axhline(result["full_auc_mean"], color="gray", lw=1, ls=":", label="full data")
    ax.set_xlabel("labeled fraction")
    ax.set_ylabel("test AUC")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# entry point

_SUBCOMMANDS = {
    "make-toy": cmd_make_toy,
    "train-ae": cmd_train_ae,
    "train-cgan": cmd_train_cgan,
    "generate": cmd_generate,
    "score": cmd_score,
    "run": cmd_run,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alforge",
        description="Active-learning image forge: synthesize, score, select.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
        p.add_argument("--force", action="store_true", help="redo completed outputs")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_config(args.config, seed_override=args.seed)
        return _SUBCOMMANDS[args.subcommand](rc, args)
    except AlforgeError as exc:
        print(f"ERROR {exc.category}: {exc}", file=sys.stderr)
        return _EXIT_CODES.get(exc.category, 1)
    except Exception as exc:  # pragma: no cover - defensive
        traceback.print_exc()
        print(f"ERROR INTERNAL: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
