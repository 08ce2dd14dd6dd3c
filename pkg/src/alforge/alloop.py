"""The active-learning loop: fine-tune, generate, score, select, stop.

One round (1) augments the previous round's additions and fine-tunes the
classifier head (and retrains the segmenter when that task is on), (2)
synthesizes candidates from still-unannotated pool images by perturbing
their masks through the conditional GAN, (3) scores every candidate with
MC-dropout predictive uncertainty, (4) adds the top-k per class to the
labeled set with exact class balance, and (5) evaluates on the held-out
test split. Rounds repeat until the test AUC plateaus or the pool runs
out.

Annotation accounting: selecting a synthetic candidate consumes its real
parent's mask and label, so the parent is marked annotated and leaves the
candidate-source pool; fractions are reported against all real train
images. The evaluation split never feeds generation or selection.

All stochastic steps draw from streams named by round index, which makes a
resumed run bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import json
from collections import namedtuple
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import maskops, pretext
from .cgan import ConditionalGan, MaskAutoencoder, train_autoencoder, train_cgan
from .core import (
    LABELS,
    DatasetManifest,
    ExperimentConfig,
    ImageSample,
    load_samples,
    split_initial,
)
from .errors import DataError, PoolExhaustedError
from .metrics import EvalReport, FeatureExtractor, annotation_savings, dice, hausdorff, sens_spec_auc
from .models import DropoutClassifier, UNetSegmenter, train_segmenter
from .nets import BackboneNet, ClassifierHead
from .rng import RngStream

ACQUISITIONS = ("uncertainty", "random")
TASKS = ("classification", "segmentation")

_AugPair = namedtuple("_AugPair", ["pixels", "mask", "label"])


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class ALState:
    """Resumable snapshot of one active-learning run."""

    round: int
    labeled_ids: tuple[str, ...]
    annotated_real_ids: tuple[str, ...]
    pool_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    additions_per_round: tuple[tuple[str, ...], ...]
    candidate_records: tuple[tuple[str, str, str, float], ...]
    metric_history: tuple[dict, ...]
    baseline: dict | None
    stopped: bool
    stop_reason: str
    acquisition: str
    tasks: tuple[str, ...]
    seed: int
    config: dict

    def aucs(self) -> list[float]:
        return [row["auc"] for row in self.metric_history]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ALState":
        d = json.loads(text)
        d["labeled_ids"] = tuple(d["labeled_ids"])
        d["annotated_real_ids"] = tuple(d["annotated_real_ids"])
        d["pool_ids"] = tuple(d["pool_ids"])
        d["test_ids"] = tuple(d["test_ids"])
        d["additions_per_round"] = tuple(tuple(a) for a in d["additions_per_round"])
        d["candidate_records"] = tuple(tuple(c) for c in d["candidate_records"])
        d["metric_history"] = tuple(d["metric_history"])
        d["tasks"] = tuple(d["tasks"])
        return cls(**d)


@dataclass(frozen=True)
class SelectionResult:
    """Balanced per-class selection with matching scores."""

    chosen: dict[str, list[str]]
    scores: dict[str, list[float]]
    shortfall: bool

    def all_ids(self) -> list[str]:
        out = []
        for label in LABELS:
            out.extend(self.chosen.get(label, []))
        return out


# ---------------------------------------------------------------------------
# pure selection logic


def rank_candidates(scored) -> dict[str, list[tuple[str, float]]]:
    """Per-class stable descending sort; ties break lexicographically by id."""
    ranked: dict[str, list[tuple[str, float]]] = {label: [] for label in LABELS}
    for sample_id, label, score in scored:
        if not np.isfinite(score):
            raise DataError(f"non-finite score for candidate {sample_id!r}")
        if label not in ranked:
            raise DataError(f"unknown label {label!r}")
        ranked[label].append((sample_id, float(score)))
    for label in ranked:
        ranked[label].sort(key=lambda item: (-item[1], item[0]))
    return ranked


def select_balanced(ranked, k_per_class: int, labeled_ids=()) -> SelectionResult:
    """Take the top k per class, skipping already-labeled ids.

    A class with fewer than k candidates contributes what it has and the
    shortfall flag is raised; if every class is empty the pool is exhausted.
    """
    labeled = set(labeled_ids)
    chosen: dict[str, list[str]] = {}
    scores: dict[str, list[float]] = {}
    shortfall = False
    any_available = False
    for label in LABELS:
        candidates = [(i, s) for i, s in ranked.get(label, []) if i not in labeled]
        if candidates:
            any_available = True
        take = candidates[:k_per_class]
        if len(take) < k_per_class:
            shortfall = True
        chosen[label] = [i for i, _ in take]
        scores[label] = [s for _, s in take]
    if not any_available:
        raise PoolExhaustedError("pool exhausted: no unlabeled candidates in any class")
    return SelectionResult(chosen=chosen, scores=scores, shortfall=shortfall)


def should_stop(metric_history, tolerance: float, patience: int) -> bool:
    """Plateau rule: AUC gain over the best previous round stayed below
    ``tolerance`` for ``patience`` consecutive rounds."""
    if patience < 1:
        raise DataError("patience must be >= 1")
    aucs = [row["auc"] if isinstance(row, dict) else float(row) for row in metric_history]
    if not aucs:
        raise DataError("empty metric history")
    if len(aucs) < patience + 1:
        return False
    for i in range(len(aucs) - patience, len(aucs)):
        if aucs[i] - max(aucs[:i]) >= tolerance:
            return False
    return True


# ---------------------------------------------------------------------------
# prepared experiment (expensive, shared across acquisition arms)


@dataclass
class PreparedExperiment:
    config: ExperimentConfig
    samples: dict[str, ImageSample]
    seed_ids: list[str]
    pool_ids: list[str]
    test_ids: list[str]
    n_train_real: int
    ae: MaskAutoencoder
    feat: FeatureExtractor
    gan: ConditionalGan
    classifier_tensors: dict[str, np.ndarray]
    classifier_params: dict
    root: RngStream = field(repr=False, default=None)

    def new_classifier(self) -> DropoutClassifier:
        model = DropoutClassifier(
            feature_channels=self.config.feature_channels, **self.classifier_params
        )
        model.backbone_ = BackboneNet(model.feature_channels)
        model.head_ = ClassifierHead(model.backbone_.feature_dim, model.dropout_rate)
        model.ce_history_ = []
        ckpt.load_module_tensors(model.backbone_, self.classifier_tensors, "backbone/")
        ckpt.load_module_tensors(model.head_, self.classifier_tensors, "head/")
        model.freeze_backbone()
        return model


def prepare_experiment(config: ExperimentConfig, manifest: DatasetManifest) -> PreparedExperiment:
    """Load data, split, and train the frozen stage: backbone, AE, cGAN.

    The feature backbone is the external-weights stand-in (pretext-trained,
    shared across experiment seeds); the content-loss feature extractor
    reuses its maps, as the published recipe reuses its pretrained network
    for both roles.
    """
    torch.set_num_threads(max(1, config.torch_threads))
    root = RngStream(config.seed)
    samples = {s.id: s for s in load_samples(manifest)}
    seed_ids, pool_ids, test_ids = split_initial(manifest, config, root)
    seed_samples = [samples[i] for i in seed_ids]

    backbone = pretext.generic_backbone_from_config(config)
    feat = FeatureExtractor.from_net(backbone)

    ae = train_autoencoder(
        np.stack([s.mask for s in seed_samples]),
        config,
        random_state=root.child("ae").torch_seed() % (2**31),
    )
    gan = train_cgan(seed_samples, ae, feat, config, root.child("cgan"))

    classifier_params = dict(
        dropout_rate=config.dropout_rate,
        head_steps=config.head_steps,
        learning_rate=config.head_lr,
        batch_size=config.effective_batch_size,
        het_samples=config.het_train_samples,
        random_state=root.child("classifier").torch_seed() % (2**31),
    )
    classifier = DropoutClassifier.with_backbone(backbone, **classifier_params)
    tensors = {}
    tensors.update(ckpt.module_tensors(classifier.backbone_, "backbone/"))
    tensors.update(ckpt.module_tensors(classifier.head_, "head/"))

    return PreparedExperiment(
        config=config,
        samples=samples,
        seed_ids=list(seed_ids),
        pool_ids=list(pool_ids),
        test_ids=list(test_ids),
        n_train_real=len(seed_ids) + len(pool_ids),
        ae=ae,
        feat=feat,
        gan=gan,
        classifier_tensors=tensors,
        classifier_params=classifier_params,
        root=root,
    )


# ---------------------------------------------------------------------------
# the runner


class ALRunner:
    """Drives rounds over a prepared experiment; single-writer, resumable."""

    def __init__(
        self,
        prep: PreparedExperiment,
        acquisition: str = "uncertainty",
        tasks: tuple[str, ...] = ("classification",),
        out_dir: Path | None = None,
    ):
        if acquisition not in ACQUISITIONS:
            raise DataError(f"unknown acquisition {acquisition!r}")
        unknown = set(tasks) - set(TASKS)
        if unknown:
            raise DataError(f"unknown tasks {sorted(unknown)}")
        self.prep = prep
        self.config = prep.config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.classifier = prep.new_classifier()
        self.segmenter: UNetSegmenter | None = None
        self.synthetic_store: dict[str, ImageSample] = {}
        self.train_features: list[np.ndarray] = []
        self.train_labels: list[int] = []
        self.aug_pairs: list[_AugPair] = []

        self.test_samples = [prep.samples[i] for i in prep.test_ids]
        self.test_features = self.classifier.features(
            np.stack([s.pixels for s in self.test_samples])
        )
        self.test_labels = np.array(
            [1 if s.label == "nodule" else 0 for s in self.test_samples]
        )

        baseline = self._evaluate(list(prep.seed_ids))
        self.state = ALState(
            round=0,
            labeled_ids=tuple(prep.seed_ids),
            annotated_real_ids=tuple(prep.seed_ids),
            pool_ids=tuple(prep.pool_ids),
            test_ids=tuple(prep.test_ids),
            additions_per_round=(tuple(prep.seed_ids),),
            candidate_records=(),
            metric_history=(),
            baseline=baseline,
            stopped=False,
            stop_reason="",
            acquisition=acquisition,
            tasks=tuple(tasks),
            seed=self.config.seed,
            config=asdict(self.config),
        )

    # -- helpers -------------------------------------------------------------

    def _sample(self, sample_id: str) -> ImageSample:
        if sample_id in self.synthetic_store:
            return self.synthetic_store[sample_id]
        return self.prep.samples[sample_id]

    def _round_stream(self, round_index: int) -> RngStream:
        return self.prep.root.child(f"round{round_index}")

    def _draw_augment(self, gen) -> tuple[str, float, tuple[int, int]]:
        flip = str(gen.choice(np.array(maskops.FLIPS)))
        rotation = float(gen.uniform(-15.0, 15.0))
        translation = (int(gen.integers(-4, 5)), int(gen.integers(-4, 5)))
        return flip, rotation, translation

    def _ingest_additions(self, additions, round_index: int, augment_factor=None):
        """Add samples + their augmented copies to the training caches."""
        if augment_factor is None:
            augment_factor = self.config.augment_factor
        new_images, new_masks, new_labels = [], [], []
        for sid in additions:
            sample = self._sample(sid)
            label = 1 if sample.label == "nodule" else 0
            new_images.append(sample.pixels)
            new_masks.append(sample.mask)
            new_labels.append(label)
            stream = self._round_stream(round_index).child(f"augment/{sid}")
            gen = stream.generator()
            for _ in range(augment_factor):
                flip, rotation, translation = self._draw_augment(gen)
                try:
                    img, msk = maskops.standard_augment(
                        sample.pixels, sample.mask, flip, rotation, translation
                    )
                except DataError:
                    img, msk = sample.pixels, sample.mask
                new_images.append(img)
                new_masks.append(msk)
                new_labels.append(label)
        feats = self.classifier.features(np.stack(new_images).astype(np.float32))
        self.train_features.extend(feats)
        self.train_labels.extend(new_labels)
        for img, msk, lab in zip(new_images, new_masks, new_labels):
            self.aug_pairs.append(_AugPair(img, msk, "nodule" if lab else "normal"))

    def _fine_tune(self, round_index: int):
        stream = self._round_stream(round_index)
        self.classifier.finetune(
            None,
            np.array(self.train_labels),
            seed=stream.child("finetune").torch_seed() % (2**31),
            features=np.stack(self.train_features),
        )
        if "segmentation" in self.state.tasks:
            self.segmenter = train_segmenter(
                self.aug_pairs, self.config, stream.child("segmenter")
            )

    def _generate_candidates(self, round_index: int):
        """Synthesize scored candidates from still-unannotated pool images."""
        stream = self._round_stream(round_index)
        sources = sorted(self.state.pool_ids)
        if self.config.pool_subsample and len(sources) > self.config.pool_subsample:
            gen = stream.child("subsample").generator()
            picked = gen.choice(len(sources), size=self.config.pool_subsample, replace=False)
            sources = [sources[i] for i in sorted(picked)]

        if self.config.synth_per_image == 0:
            return [self.prep.samples[sid] for sid in sources]

        candidates: list[ImageSample] = []
        batch_imgs, batch_masks, batch_meta = [], [], []
        for sid in sources:
            source = self.prep.samples[sid]
            perturbs = maskops.generate_perturbations(
                source,
                self.config.synth_per_image,
                self.config,
                stream.child(f"gen/{sid}"),
            )
            for i, (mask, spec) in enumerate(perturbs):
                batch_imgs.append(source.pixels)
                batch_masks.append(mask)
                batch_meta.append((f"syn_r{round_index}_{sid}_{i:03d}", source, spec))

        for lo in range(0, len(batch_imgs), 64):
            hi = min(lo + 64, len(batch_imgs))
            codes = self.prep.ae.transform(np.stack(batch_masks[lo:hi]))
            pixels = self.prep.gan.synthesize_batch(np.stack(batch_imgs[lo:hi]), codes)
            for j, (cid, source, spec) in enumerate(batch_meta[lo:hi]):
                candidates.append(
                    ImageSample(
                        id=cid,
                        pixels=np.clip(pixels[j], 0.0, 1.0),
                        mask=batch_masks[lo + j],
                        label=source.label,
                        provenance="synthetic",
                        parent_id=source.id,
                        perturbation=spec,
                    )
                )
        return candidates

    def _score_candidates(self, candidates, round_index: int) -> list[float]:
        stream = self._round_stream(round_index).child("score")
        if self.state.acquisition == "random":
            return list(stream.generator().random(len(candidates)))
        feats = self.classifier.features(
            np.stack([c.pixels for c in candidates]).astype(np.float32)
        )
        y, var = self.classifier.mc_forward_features(feats, self.config.t_mc, stream)
        epistemic = np.clip(np.mean(y**2, axis=0) - np.mean(y, axis=0) ** 2, 0.0, None)
        aleatoric = np.mean(var, axis=0)
        return list(epistemic + aleatoric)

    def _evaluate(self, annotated_real_ids) -> dict:
        probs = self.classifier.predict_proba_from_features(self.test_features)[:, 1]
        sens, spec, auc = sens_spec_auc(probs, self.test_labels)

        dice_val = hd_val = None
        if self.segmenter is not None:
            images = np.stack([s.pixels for s in self.test_samples])
            preds = self.segmenter.predict(images)
            dices, hds = [], []
            diag = float(np.hypot(*images.shape[1:]))
            for pred, sample in zip(preds, self.test_samples):
                dices.append(dice(pred, sample.mask))
                # an empty prediction has no boundary; penalize with the diagonal
                hds.append(hausdorff(pred, sample.mask) if pred.sum() else diag)
            dice_val = float(np.mean(dices))
            hd_val = float(np.mean(hds))

        test_set = set(self.prep.test_ids)
        real_train = [
            s for s in self.prep.samples.values()
            if s.id not in test_set and s.provenance == "real"
        ]
        pixel_fraction, _ = annotation_savings(annotated_real_ids, real_train)
        report = EvalReport(
            sens=sens,
            spec=spec,
            auc=auc,
            dice=dice_val,
            hd=hd_val,
            labeled_fraction=len(annotated_real_ids) / self.prep.n_train_real,
            pixel_fraction=pixel_fraction,
        )
        return report.to_dict()

    # -- one round -----------------------------------------------------------

    def round_once(self) -> ALState:
        state = self.state
        if state.stopped:
            raise DataError("cannot run a round on a stopped state")
        r = state.round + 1
        stream = self._round_stream(r)

        # (1)-(2) augment the latest additions, fine-tune on the labeled pool
        self._ingest_additions(state.additions_per_round[-1], r)
        self._fine_tune(r)

        # (3)-(6) generate, score, select, add
        stopped, stop_reason = False, ""
        additions: tuple[str, ...] = ()
        records: tuple = ()
        annotated = list(state.annotated_real_ids)
        pool = list(state.pool_ids)
        labeled = list(state.labeled_ids)
        if not pool:
            stopped, stop_reason = True, "pool_exhausted"
        else:
            candidates = self._generate_candidates(r)
            scores = self._score_candidates(candidates, r)
            records = tuple(
                (c.id, c.parent_id or c.id, c.label, float(s))
                for c, s in zip(candidates, scores)
            )
            ranked = rank_candidates([(c.id, c.label, s) for c, s in zip(candidates, scores)])
            try:
                selection = select_balanced(ranked, self.config.top_k_per_class, labeled)
            except PoolExhaustedError:
                selection = None
                stopped, stop_reason = True, "pool_exhausted"
            if selection is not None:
                by_id = {c.id: c for c in candidates}
                chosen = tuple(selection.all_ids())
                added = []
                for cid in chosen:
                    cand = by_id[cid]
                    labeled.append(cid)
                    added.append(cid)
                    if cand.provenance == "synthetic":
                        self.synthetic_store[cid] = cand
                    # selecting a child consumes its parent's mask and label:
                    # the parent is now annotated and joins the labeled pool
                    parent = cand.parent_id or cand.id
                    if parent not in annotated:
                        annotated.append(parent)
                        if parent not in labeled:
                            labeled.append(parent)
                            added.append(parent)
                    if parent in pool:
                        pool.remove(parent)
                additions = tuple(added)

        # (7) evaluate on the held-out split and extend the history
        row = {"round": r, "labeled_count": len(labeled)}
        row.update(self._evaluate(annotated))
        history = state.metric_history + (row,)

        if not stopped:
            if should_stop(history, self.config.stop_tolerance, self.config.stop_patience):
                stopped, stop_reason = True, "plateau"
            elif not pool:
                stopped, stop_reason = True, "pool_exhausted"
            elif r >= self.config.max_rounds:
                stopped, stop_reason = True, "max_rounds"

        self.state = replace(
            state,
            round=r,
            labeled_ids=tuple(labeled),
            annotated_real_ids=tuple(annotated),
            pool_ids=tuple(pool),
            additions_per_round=state.additions_per_round + (additions,),
            candidate_records=records,
            metric_history=history,
            stopped=stopped,
            stop_reason=stop_reason,
        )
        if self.out_dir is not None:
            self.write_outputs()
        return self.state

    def run(self) -> ALState:
        while not self.state.stopped:
            try:
                self.round_once()
            except Exception:
                if self.out_dir is not None:
                    self.write_outputs(tag="error")
                raise
        return self.state

    # -- persistence -----------------------------------------------------------

    def report_text(self) -> str:
        lines = [EvalReport.CSV_HEADER]
        for row in self.state.metric_history:
            report = EvalReport.from_dict(row)
            lines.append(report.csv_row(row["round"], row["labeled_count"]))
        return "\n".join(lines) + "\n"

    def write_outputs(self, tag: str | None = None):
        out = self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.report_text())
        summary = {
            "stopped": self.state.stopped,
            "stop_reason": self.state.stop_reason,
            "round": self.state.round,
            "acquisition": self.state.acquisition,
            "baseline": self.state.baseline,
            "labeled_count": len(self.state.labeled_ids),
            "annotated_real": len(self.state.annotated_real_ids),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        name = f"round_{self.state.round:04d}" + (f"_{tag}" if tag else "") + ".ckpt"
        self.save_checkpoint(out / "checkpoints" / name)

    def save_checkpoint(self, path: Path):
        tensors = {}
        tensors.update(ckpt.module_tensors(self.classifier.backbone_, "classifier/backbone/"))
        tensors.update(ckpt.module_tensors(self.classifier.head_, "classifier/head/"))
        synth_meta = {}
        for sid, sample in self.synthetic_store.items():
            tensors[f"synthetic/{sid}/pixels"] = sample.pixels.astype(np.float32)
            tensors[f"synthetic/{sid}/mask"] = sample.mask
            synth_meta[sid] = {
                "label": sample.label,
                "parent_id": sample.parent_id,
                "spec": sample.perturbation.to_kv_block(),
            }
        ckpt.save_checkpoint(
            path,
            kind="alstate",
            architecture={
                "feature_channels": self.config.feature_channels,
                "dropout_rate": self.config.dropout_rate,
            },
            tensors=tensors,
            extra={"state": json.loads(self.state.to_json()), "synthetic": synth_meta},
        )

    @classmethod
    def resume(cls, prep: PreparedExperiment, path: Path, out_dir: Path | None = None) -> "ALRunner":
        """Rebuild a runner from a round checkpoint; continues bit-identically."""
        data = ckpt.load_checkpoint(path)
        if data.kind != "alstate":
            raise DataError(f"{path} is a {data.kind!r} checkpoint")
        state = ALState.from_json(json.dumps(data.extra["state"]))
        runner = cls(prep, state.acquisition, state.tasks, out_dir=out_dir)
        ckpt.load_module_tensors(runner.classifier.backbone_, data.tensors, "classifier/backbone/")
        ckpt.load_module_tensors(runner.classifier.head_, data.tensors, "classifier/head/")
        runner.classifier.freeze_backbone()
        for sid, meta in data.extra["synthetic"].items():
            runner.synthetic_store[sid] = ImageSample(
                id=sid,
                pixels=data.tensors[f"synthetic/{sid}/pixels"].astype(np.float64),
                mask=data.tensors[f"synthetic/{sid}/mask"],
                label=meta["label"],
                provenance="synthetic",
                parent_id=meta["parent_id"],
                perturbation=maskops.PerturbationSpec.from_kv_block(meta["spec"]),
            )
        runner.state = state
        # rebuild the training caches for every round that already ingested;
        # the final additions entry belongs to the *next* round
        runner.train_features, runner.train_labels, runner.aug_pairs = [], [], []
        for i, additions in enumerate(state.additions_per_round[:-1]):
            runner._ingest_additions(additions, i + 1)
        if "segmentation" in state.tasks and state.round >= 1 and runner.aug_pairs:
            runner.segmenter = train_segmenter(
                runner.aug_pairs, runner.config,
                runner._round_stream(state.round).child("segmenter"),
            )
        return runner


# ---------------------------------------------------------------------------
# top-level drivers


def al_round(runner: ALRunner) -> ALState:
    """Advance one round; thin alias over :meth:`ALRunner.round_once`."""
    return runner.round_once()


def run_al(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: Path | None = None,
    acquisition: str = "uncertainty",
    tasks: tuple[str, ...] = ("classification",),
    prep: PreparedExperiment | None = None,
) -> ALState:
    """Drive rounds until plateau or pool exhaustion; deterministic per seed."""
    if prep is None:
        prep = prepare_experiment(config, manifest)
    runner = ALRunner(prep, acquisition=acquisition, tasks=tasks, out_dir=out_dir)
    return runner.run()


def full_data_performance(
    prep: PreparedExperiment,
    tasks: tuple[str, ...] = ("classification",),
) -> dict:
    """Fully supervised reference: fine-tune the same frozen backbone's head
    on every real train image (with FSL-level augmentation)."""
    config = prep.config
    runner = ALRunner(prep, acquisition="uncertainty", tasks=tasks)
    all_train = list(prep.seed_ids) + list(prep.pool_ids)
    runner._ingest_additions(all_train, round_index=0, augment_factor=config.fsl_augment_factor)
    runner.classifier.finetune(
        None,
        np.array(runner.train_labels),
        steps=config.fsl_finetune_steps,
        seed=prep.root.child("fsl").torch_seed() % (2**31),
        features=np.stack(runner.train_features),
    )
    if "segmentation" in tasks:
        runner.segmenter = train_segmenter(
            runner.aug_pairs, config, prep.root.child("fsl/segmenter")
        )
    return runner._evaluate(all_train)


def compare_acquisitions(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    seeds,
    tasks: tuple[str, ...] = ("classification",),
) -> dict:
    """Paired uncertainty-vs-random runs over several seeds.

    Per seed, the expensive frozen stage (autoencoder, GAN, backbone) is
    trained once and shared by both arms; only acquisition differs. Returns
    curves (per arm, per seed: rounds of (labeled_fraction, auc)), the
    full-data reference AUCs, and per-round mean curves.
    """
    curves: dict[str, list] = {"uncertainty": [], "random": []}
    full_aucs = []
    for seed in seeds:
        cfg = replace(config, seed=int(seed))
        prep = prepare_experiment(cfg, manifest)
        full = full_data_performance(prep, tasks)
        full_aucs.append(full["auc"])
        for acq in ACQUISITIONS:
            runner = ALRunner(prep, acquisition=acq, tasks=tasks)
            state = runner.run()
            points = [
                {
                    "round": 0,
                    "labeled_fraction": state.baseline["labeled_fraction"],
                    "auc": state.baseline["auc"],
                }
            ]
            points.extend(
                {
                    "round": row["round"],
                    "labeled_fraction": row["labeled_fraction"],
                    "auc": row["auc"],
                }
                for row in state.metric_history
            )
            curves[acq].append(points)

    n_rounds = {acq: min(len(c) for c in curves[acq]) for acq in ACQUISITIONS}
    shared = min(n_rounds.values())
    mean_curves = {}
    for acq in ACQUISITIONS:
        rows = []
        for r in range(shared):
            fr = float(np.mean([c[r]["labeled_fraction"] for c in curves[acq]]))
            auc = float(np.mean([c[r]["auc"] for c in curves[acq]]))
            rows.append({"round": r, "labeled_fraction": fr, "auc": auc})
        mean_curves[acq] = rows
    return {
        "curves": curves,
        "mean_curves": mean_curves,
        "full_auc_mean": float(np.mean(full_aucs)),
        "full_aucs": full_aucs,
        "shared_rounds": shared,
    }
