"""Training regimes: contrastive pretraining, downstream fine-tuning, joint training.

Representational transfer runs ``run_ssl_pretrain`` and then
``run_downstream`` from the pretrained encoder. Functional transfer
(``run_functional``) optimises ``ce + lambda * nt_xent`` in one stage over all
parameters. ``supervised_only`` and ``ssl_only`` are the two single-objective
baselines.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import ViewPair, light_policy, make_view_pair
from .config import RunConfig, with_normalization
from .data import Split, batch_iterator, channel_stats, load_dataset
from .errors import DegenerateEmbedding, DivergenceError, IncompatibleCheckpoint, InvalidConfig, PersistenceError
from .evaluation import MetricsReport, canonical_json, evaluate, metrics_document
from .losses import ContrastiveConfig, contrastive_accuracy, cross_entropy, fkt_loss, joint_objective, nt_xent
from .model import (Checkpoint, FKTModel, build_model, encode_views, export_parameters, forward_joint,
                    load_encoder, save_checkpoint)
from .optim import LARS, SGD, cosine_lr, lars_param_groups

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "ssl_loss", "ce_loss", "fkt_loss", "train_acc", "test_acc", "wall_seconds")
# stage index feeds the augmentation / shuffle streams, so a downstream stage
# never replays the pretraining crops
STAGE_STREAM = {"pretrain": 0, "functional": 0, "supervised_only": 0, "ssl_only": 0, "downstream": 1}


@dataclass
class EpochRecord:
    epoch: int
    mean_ssl_loss: float
    mean_ce_loss: float
    mean_fkt_loss: float
    train_accuracy: float
    test_accuracy: Optional[float]
    wall_seconds: float
    lam: float = 1.0
    stage: str = ""

    def csv_row(self) -> list:
        test = "" if self.test_accuracy is None else repr(self.test_accuracy)
        return [self.epoch, repr(self.mean_ssl_loss), repr(self.mean_ce_loss), repr(self.mean_fkt_loss),
                repr(self.train_accuracy), test, f"{self.wall_seconds:.3f}"]


@dataclass
class StageResult:
    model: FKTModel
    records: list
    metrics: Optional[MetricsReport] = None
    checkpoint: Optional[Checkpoint] = None
    checkpoint_paths: list = field(default_factory=list)


@dataclass
class TrialResult:
    trial: int
    seed: int
    records: list
    metrics: Optional[MetricsReport]
    checkpoint_paths: list
    model: FKTModel


@dataclass
class ExperimentResult:
    cfg: RunConfig
    trials: list
    document: Optional[dict]
    out_dir: Optional[Path] = None


# ---------------------------------------------------------------- setup

def configure_determinism(enabled: bool):
    torch.use_deterministic_algorithms(enabled, warn_only=False)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = enabled
        torch.backends.cudnn.benchmark = not enabled


def resolve_device(name: str) -> torch.device:
    if name in ("gpu", "cuda"):
        if not torch.cuda.is_available():
            raise InvalidConfig("device", "gpu requested but CUDA is unavailable")
        return torch.device("cuda")
    return torch.device("cpu")


def stream_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, STAGE_STREAM[stage]]).generate_state(1)[0])


def prepare_data(cfg: RunConfig, data=None) -> tuple:
    """Load splits and fill in normalisation statistics from the training split if unset."""
    train, test = data if data is not None else load_dataset(cfg.dataset)
    if cfg.augment.normalization_mean is None or cfg.augment.normalization_std is None:
        mean, std = channel_stats(train)
        cfg = with_normalization(cfg, mean, std)
    return cfg, train, test


def make_optimizer(model: FKTModel, ocfg) -> torch.optim.Optimizer:
    if ocfg.name == "lars":
        groups = lars_param_groups(model.named_parameters())
        return LARS(groups, lr=ocfg.lr, momentum=ocfg.momentum, weight_decay=ocfg.weight_decay,
                    trust_coefficient=ocfg.trust_coefficient)
    params = [p for p in model.parameters() if p.requires_grad]
    return SGD(params, lr=ocfg.lr, momentum=ocfg.momentum, weight_decay=ocfg.weight_decay)


# ---------------------------------------------------------------- one step per mode

def _supervised_terms(model: FKTModel, pair: ViewPair):
    fa, fb = encode_views(model, pair)
    la, lb = model.classifier(torch.cat([fa, fb])).chunk(2)
    ce = 0.5 * (cross_entropy(la, pair.labels) + cross_entropy(lb, pair.labels))
    correct = (la.argmax(1) == pair.labels).sum().item() + (lb.argmax(1) == pair.labels).sum().item()
    return ce, correct / (2 * len(pair))


def _ssl_terms(model: FKTModel, pair: ViewPair, ccfg: ContrastiveConfig):
    fa, fb = encode_views(model, pair)
    pa, pb = model.projector(torch.cat([fa, fb])).chunk(2)
    return nt_xent(pa, pb, ccfg), contrastive_accuracy(pa, pb)


def _joint_terms(model: FKTModel, pair: ViewPair, ccfg: ContrastiveConfig):
    emb = forward_joint(model, pair)
    ssl = nt_xent(emb.projections_a, emb.projections_b, ccfg)
    ce = 0.5 * (cross_entropy(emb.logits_a, pair.labels) + cross_entropy(emb.logits_b, pair.labels))
    correct = ((emb.logits_a.argmax(1) == pair.labels).sum().item()
               + (emb.logits_b.argmax(1) == pair.labels).sum().item())
    return ssl, ce, correct / (2 * len(pair))


def _check_finite(loss: torch.Tensor, epoch: int, batch_index: int, pair: ViewPair):
    if not torch.isfinite(loss):
        ids = pair.sample_ids[:8].tolist()
        log.error("non-finite loss at epoch %d batch %d (sample ids %s...)", epoch, batch_index, ids)
        raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch_index} (sample ids {ids}...)")


# ---------------------------------------------------------------- shared epoch loop

def _train(model: FKTModel, cfg: RunConfig, train: Split, test: Optional[Split], seed: int, *, mode: str,
           stage: str, epochs: int, ocfg, trial: int, out_dir: Optional[Path], epoch_offset: int = 0,
           freeze_encoder: bool = False) -> StageResult:
    device = resolve_device(cfg.device)
    model.to(device)
    if freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    optimizer = make_optimizer(model, ocfg)
    ccfg = ContrastiveConfig(temperature=cfg.temperature)
    policy = cfg.augment
    if mode == "supervised" and cfg.supervised_augment == "light":
        policy = light_policy(policy)
    lam = {"joint": cfg.lam, "ssl": 1.0, "supervised": 0.0}[mode]
    aug_seed = stream_seed(seed, stage)
    records, ckpt_paths = [], []
    metrics = None

    for local_epoch in range(epochs):
        start = time.perf_counter()
        if ocfg.schedule == "cosine":
            for group in optimizer.param_groups:
                group["lr"] = cosine_lr(ocfg.lr, local_epoch, epochs)
        model.train()
        if freeze_encoder:
            model.encoder.eval()
        ssl_sum = ce_sum = acc_sum = 0.0
        n_batches = 0
        for b, batch in enumerate(batch_iterator(train, cfg.batch_size, aug_seed, drop_last=True, epoch=local_epoch)):
            pair = make_view_pair(batch, policy, aug_seed, local_epoch, workers=cfg.workers)
            pair = ViewPair(pair.view_a.to(device), pair.view_b.to(device), pair.labels.to(device), pair.sample_ids)
            try:
                if mode == "ssl":
                    ssl, acc = _ssl_terms(model, pair, ccfg)
                    ce, loss = None, ssl
                elif mode == "supervised":
                    ce, acc = _supervised_terms(model, pair)
                    ssl, loss = None, ce
                else:
                    ssl, ce, acc = _joint_terms(model, pair, ccfg)
                    loss = joint_objective(ssl, ce, lam)
            except DegenerateEmbedding:
                loss = torch.tensor(float("nan"))
            _check_finite(loss, epoch_offset + local_epoch, b, pair)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            ssl_sum += 0.0 if ssl is None else ssl.item()
            ce_sum += 0.0 if ce is None else ce.item()
            acc_sum += acc
            n_batches += 1

        breakdown = fkt_loss(ssl_sum / n_batches, ce_sum / n_batches, lam)
        test_acc = None
        if mode != "ssl" and test is not None:
            metrics = evaluate(model, test, cfg.augment, cfg.eval_batch_size)
            test_acc = metrics.accuracy
        record = EpochRecord(epoch_offset + local_epoch, breakdown.ssl_loss, breakdown.ce_loss, breakdown.fkt_loss,
                             acc_sum / n_batches, test_acc, time.perf_counter() - start, lam, stage)
        records.append(record)
        log.info("trial %d %s epoch %d: ssl=%.4f ce=%.4f fkt=%.4f train_acc=%.4f test_acc=%s",
                 trial, stage, record.epoch, record.mean_ssl_loss, record.mean_ce_loss, record.mean_fkt_loss,
                 record.train_accuracy, "-" if test_acc is None else f"{test_acc:.4f}")

        last = local_epoch == epochs - 1
        if out_dir is not None and (last or (cfg.checkpoint_every and (local_epoch + 1) % cfg.checkpoint_every == 0)):
            ckpt = export_parameters(model, regime=cfg.regime, stage=stage, trial=trial, epoch=record.epoch,
                                     run_config_hash=cfg.hash())
            ckpt_paths.append(save_checkpoint(ckpt, Path(out_dir) / "checkpoints" / f"{cfg.regime}_{trial}_{record.epoch}.ckpt"))

    if freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(True)
    final = export_parameters(model, regime=cfg.regime, stage=stage, trial=trial,
                              epoch=epoch_offset + epochs - 1, run_config_hash=cfg.hash())
    return StageResult(model, records, metrics, final, ckpt_paths)


def _trial_seed(cfg: RunConfig, seed: Optional[int], trial: int) -> int:
    return cfg.seeds[trial] if seed is None else seed


# ---------------------------------------------------------------- regimes

def run_ssl_pretrain(cfg: RunConfig, data=None, seed: Optional[int] = None, trial: int = 0,
                     out_dir=None) -> StageResult:
    """Contrastive-only training of encoder and projector; labels are never used by the loss."""
    cfg, train, test = prepare_data(cfg, data)
    seed = _trial_seed(cfg, seed, trial)
    model = build_model(cfg.model, seed)
    return _train(model, cfg, train, None, seed, mode="ssl", stage="pretrain" if cfg.regime == "representational" else "ssl_only",
                  epochs=cfg.stage_epochs[0], ocfg=cfg.ssl_optimizer, trial=trial, out_dir=out_dir)


def run_downstream(cfg: RunConfig, encoder_ckpt: Checkpoint, data=None, seed: Optional[int] = None, trial: int = 0,
                   out_dir=None, epoch_offset: int = 0) -> StageResult:
    """Cross-entropy training from a pretrained encoder, fresh projector and classifier."""
    cfg, train, test = prepare_data(cfg, data)
    seed = _trial_seed(cfg, seed, trial)
    model = build_model(cfg.model, seed)
    if encoder_ckpt.header.get("backbone") != cfg.model.backbone:
        raise IncompatibleCheckpoint(f"checkpoint backbone {encoder_ckpt.header.get('backbone')!r} "
                                     f"vs config {cfg.model.backbone!r}")
    load_encoder(model, encoder_ckpt)
    return _train(model, cfg, train, test, seed, mode="supervised", stage="downstream", epochs=cfg.epochs,
                  ocfg=cfg.supervised_optimizer, trial=trial, out_dir=out_dir, epoch_offset=epoch_offset,
                  freeze_encoder=cfg.freeze_encoder)


def run_functional(cfg: RunConfig, data=None, seed: Optional[int] = None, trial: int = 0, out_dir=None) -> StageResult:
    """Single-stage joint training of ``ce + lambda * nt_xent`` over all parameters."""
    cfg, train, test = prepare_data(cfg, data)
    seed = _trial_seed(cfg, seed, trial)
    model = build_model(cfg.model, seed)
    return _train(model, cfg, train, test, seed, mode="joint", stage="functional", epochs=cfg.epochs,
                  ocfg=cfg.joint_optimizer, trial=trial, out_dir=out_dir)


def run_supervised_only(cfg: RunConfig, data=None, seed: Optional[int] = None, trial: int = 0,
                        out_dir=None) -> StageResult:
    """Cross-entropy from random initialisation; the projector is never evaluated."""
    cfg, train, test = prepare_data(cfg, data)
    seed = _trial_seed(cfg, seed, trial)
    model = build_model(cfg.model, seed)
    return _train(model, cfg, train, test, seed, mode="supervised", stage="supervised_only", epochs=cfg.epochs,
                  ocfg=cfg.supervised_optimizer, trial=trial, out_dir=out_dir)


def run_trial(cfg: RunConfig, data=None, trial: int = 0, out_dir=None) -> TrialResult:
    cfg, train, test = prepare_data(cfg, data)
    data = (train, test)
    seed = cfg.seeds[trial]
    if cfg.regime == "representational":
        pre = run_ssl_pretrain(cfg, data, seed, trial, out_dir)
        down = run_downstream(cfg, pre.checkpoint, data, seed, trial, out_dir, epoch_offset=cfg.stage_epochs[0])
        return TrialResult(trial, seed, pre.records + down.records, down.metrics,
                           pre.checkpoint_paths + down.checkpoint_paths, down.model)
    runner = {"functional": run_functional, "supervised_only": run_supervised_only, "ssl_only": run_ssl_pretrain}[cfg.regime]
    res = runner(cfg, data, seed, trial, out_dir)
    return TrialResult(trial, seed, res.records, res.metrics, res.checkpoint_paths, res.model)


# ---------------------------------------------------------------- persistence

def write_epoch_csv(records: list, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for rec in records:
                writer.writerow(rec.csv_row())
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc
    return path


def read_epoch_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc
    return path


def epoch_csv_name(trial: int) -> str:
    return "epochs.csv" if trial == 0 else f"epochs_trial{trial}.csv"


def run_experiment(cfg: RunConfig, out_dir=None, data=None) -> ExperimentResult:
    """Run every trial of ``cfg``; with ``out_dir`` write epoch CSVs, checkpoints and metrics.json."""
    configure_determinism(cfg.determinism)
    cfg, train, test = prepare_data(cfg, data)
    out_dir = Path(out_dir) if out_dir is not None else None
    trials = []
    for trial in range(cfg.trials):
        result = run_trial(cfg, (train, test), trial, out_dir)
        trials.append(result)
        if out_dir is not None:
            write_epoch_csv(result.records, out_dir / epoch_csv_name(trial))
    reports = [t.metrics for t in trials if t.metrics is not None]
    if reports:
        document = metrics_document(cfg.regime, cfg.dataset.name, reports, cfg.epochs_total)
    else:
        document = {"regime": cfg.regime, "dataset": cfg.dataset.name, "trials": [], "mean": None, "std": None,
                    "epochs_total": cfg.epochs_total, "std_estimator": "population"}
    if out_dir is not None:
        write_text(out_dir / "metrics.json", canonical_json(document))
    return ExperimentResult(cfg, trials, document, out_dir)


# ---------------------------------------------------------------- comparison

@dataclass
class ComparisonReport:
    dataset: str
    backbone: str
    rows: dict  # regime -> {"mean", "std", "epochs_total", "per_trial"}

    @property
    def epoch_ratio(self) -> float:
        return self.rows["functional"]["epochs_total"] / self.rows["representational"]["epochs_total"]

    def accuracy_gap(self) -> float:
        """Functional minus representational mean accuracy, in percentage points."""
        return 100 * (self.rows["functional"]["mean"]["accuracy"] - self.rows["representational"]["mean"]["accuracy"])

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "backbone": self.backbone,
                "rows": [{"method": regime, **row} for regime, row in self.rows.items()],
                "epoch_ratio": self.epoch_ratio, "std_estimator": "population"}

    def to_text(self) -> str:
        header = f"{'Dataset':<16}{'Method':<28}{'Accuracy':<16}{'Precision':<16}{'Recall':<16}{'Epochs':>8}"
        lines = [header, "-" * len(header)]
        names = {"representational": "Representational Transfer", "functional": "Functional Transfer"}
        for regime, row in self.rows.items():
            cells = [f"{100 * row['mean'][k]:.2f}±{100 * row['std'][k]:.2f}" for k in ("accuracy", "precision", "recall")]
            lines.append(f"{self.dataset:<16}{names.get(regime, regime):<28}{cells[0]:<16}{cells[1]:<16}{cells[2]:<16}"
                         f"{row['epochs_total']:>8}")
        lines.append("")
        rep, fun = self.rows["representational"]["epochs_total"], self.rows["functional"]["epochs_total"]
        lines.append(f"Epochs per trial: representational {rep} vs functional {fun} (ratio {self.epoch_ratio:.2f})")
        return "\n".join(lines) + "\n"


def check_comparable(cfg_rep: RunConfig, cfg_fun: RunConfig):
    if cfg_rep.regime != "representational":
        raise InvalidConfig("regime", f"first config must be representational, got {cfg_rep.regime!r}")
    if cfg_fun.regime != "functional":
        raise InvalidConfig("regime", f"second config must be functional, got {cfg_fun.regime!r}")
    if list(cfg_rep.seeds) != list(cfg_fun.seeds):
        raise InvalidConfig("seeds", f"seed lists differ: {cfg_rep.seeds} vs {cfg_fun.seeds}")
    if cfg_rep.dataset != cfg_fun.dataset:
        raise InvalidConfig("dataset", "configs use different datasets")
    if cfg_rep.model != cfg_fun.model:
        raise InvalidConfig("model", "configs use different models")


def comparison_from_results(results: dict) -> ComparisonReport:
    first = next(iter(results.values())).cfg
    rows = {}
    for regime, res in results.items():
        rows[regime] = {"mean": res.document["mean"], "std": res.document["std"],
                        "epochs_total": res.cfg.epochs_total,
                        "per_trial": [{k: t[k] for k in ("accuracy", "precision", "recall")}
                                      for t in res.document["trials"]]}
    return ComparisonReport(first.dataset.name, first.model.backbone, rows)


def run_comparison(cfg_rep: RunConfig, cfg_fun: RunConfig, out_dir=None, data=None) -> tuple:
    """Run both regimes over the shared seeds; returns (ComparisonReport, {regime: ExperimentResult}).

    Each regime's results are written to ``out_dir/<regime>/`` as soon as it
    finishes, so a failure in the second regime keeps the first.
    """
    check_comparable(cfg_rep, cfg_fun)
    out_dir = Path(out_dir) if out_dir is not None else None
    if data is None:
        data = load_dataset(cfg_rep.dataset)
    results = {}
    for cfg in (cfg_rep, cfg_fun):
        sub = out_dir / cfg.regime if out_dir is not None else None
        results[cfg.regime] = run_experiment(cfg, sub, data)
    report = comparison_from_results(results)
    if out_dir is not None:
        write_text(out_dir / "comparison.json", canonical_json(report.to_dict()))
        write_text(out_dir / "comparison.txt", report.to_text())
    return report, results
