"""The three-phase training cycle: fit on primary data, synthesize hard
samples against the frozen net, then fit on the synthesized samples.

Two strategies: *online* keeps improving one evolving network across cycles;
*offline* additionally retrains a fresh network from scratch on the primary
data plus everything synthesized along the way (consistently the stronger
variant, at extra cost). Evaluation always uses the untouched test split;
synthesized data never enters it.
"""

import csv
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .model import ConvClassifier, evaluate, train
from .autodiff import make_optimizer
from .synthesizer import SynthesisConfig, flip_rate, synthesize_batch, write_synthesis_log

METRICS_COLUMNS = ("cycle", "phase", "epoch", "train_acc", "test_acc", "loss",
                   "synth_count", "flip_rate", "wall_ms")


class FrozenWeightsViolation(RuntimeError):
    """Weights changed while the net was frozen for synthesis."""


@dataclass
class CyclePlan:
    cycles: int = 5
    strategy: str = "offline"
    phase1_epochs: int = 20
    phase3_epochs: int = 10
    offline_epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    seed: int = 0
    variants_per_sample: int = 1
    patience: int | None = 3  # None runs every budgeted cycle
    mix_primary: bool = False
    workers: int = 1
    net_scale: str = "paper"
    num_classes: int = 10
    eval_each_epoch: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError(f"need at least one cycle, got {self.cycles}")
        if self.strategy not in ("online", "offline"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if isinstance(self.synthesis, dict):
            self.synthesis = SynthesisConfig(**self.synthesis)


@dataclass
class CycleStats:
    cycle: int
    train_acc: float
    test_acc: float
    synth_count: int
    flip_rate: float
    aborted: int
    pool_size: int
    wall_ms: float


@dataclass
class RunReport:
    strategy: str
    seed: int
    cycles: list = field(default_factory=list)
    final_accuracy: dict = field(default_factory=dict)
    stopped_early: bool = False


def stream_seed(base, *tags):
    """Stable derived seed for a named random stream."""
    parts = [int(base)] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


class MetricsWriter:
    """CSV log; one row per epoch or synthesis pass."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_COLUMNS)

    @staticmethod
    def _fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    def row(self, cycle, phase, epoch=None, train_acc=None, test_acc=None, loss=None,
            synth_count=None, flip=None, wall_ms=None):
        if not self.path:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([self._fmt(v) for v in (
                cycle, phase, epoch, train_acc, test_acc, loss, synth_count, flip, wall_ms)])


def _train_phase(net, dataset, epochs, plan, seed, test_dataset, metrics, cycle, phase):
    opt = make_optimizer(plan.optimizer, net.params(), plan.learning_rate)
    history = train(net, dataset, epochs, opt, batch_size=plan.batch_size, seed=seed,
                    test_dataset=test_dataset if plan.eval_each_epoch else None)
    for h in history:
        metrics.row(cycle, phase, epoch=h["epoch"], train_acc=h["train_acc"],
                    test_acc=h.get("test_acc"), loss=h["loss"])
    return history


def run_cycle(net, primary, pool, plan, cycle_idx, test_dataset, metrics=None):
    """One train / synthesize / retrain pass. Returns (new synthesized data,
    synthesis results, CycleStats). The net is trained in place."""
    metrics = metrics or MetricsWriter(None)
    started = time.perf_counter()

    history = _train_phase(net, primary, plan.phase1_epochs, plan,
                           stream_seed(plan.seed, "phase1", cycle_idx),
                           test_dataset, metrics, cycle_idx, phase=1)
    train_acc = history[-1]["train_acc"] if history else float("nan")

    net.freeze()
    checksum = net.weight_checksum()
    synth_started = time.perf_counter()
    synth, results = synthesize_batch(primary, net, plan.synthesis,
                                      workers=plan.workers,
                                      seed=stream_seed(plan.seed, "synthesis"),
                                      cycle=cycle_idx,
                                      variants_per_sample=plan.variants_per_sample)
    synth_ms = (time.perf_counter() - synth_started) * 1000.0
    if net.weight_checksum() != checksum:
        raise FrozenWeightsViolation(f"cycle {cycle_idx}: weights moved during synthesis")
    net.unfreeze()

    rate = flip_rate(results)
    aborted = sum(r.aborted for r in results)
    metrics.row(cycle_idx, 2, synth_count=len(synth), flip=rate, wall_ms=synth_ms)
    if plan.out_dir:
        write_synthesis_log(Path(plan.out_dir) / "synthesis_log.jsonl", results, cycle_idx)

    if len(synth):
        phase3_data = LabeledDataset.concat([synth, primary]) if plan.mix_primary else synth
        _train_phase(net, phase3_data, plan.phase3_epochs, plan,
                     stream_seed(plan.seed, "phase3", cycle_idx),
                     test_dataset, metrics, cycle_idx, phase=3)

    test_acc, test_loss = evaluate(net, test_dataset)
    wall_ms = (time.perf_counter() - started) * 1000.0
    metrics.row(cycle_idx, 3, test_acc=test_acc, loss=test_loss, wall_ms=wall_ms)
    stats = CycleStats(cycle=cycle_idx, train_acc=train_acc, test_acc=test_acc,
                       synth_count=len(synth), flip_rate=rate, aborted=aborted,
                       pool_size=len(pool) + len(synth), wall_ms=wall_ms)
    if plan.out_dir:
        net.save(Path(plan.out_dir) / f"checkpoint_cycle_{cycle_idx}.npz")
    return synth, results, stats


def stopping_check(report, patience):
    """True while the run should continue: stop once test accuracy has not
    improved for `patience` consecutive cycles."""
    if patience is None or len(report.cycles) <= patience:
        return True
    accs = [c.test_acc for c in report.cycles]
    best_idx = int(np.argmax(accs))
    return (len(accs) - 1 - best_idx) < patience


def _fresh_net(plan, primary, tag):
    h, w = primary.images.shape[2], primary.images.shape[3]
    return ConvClassifier(num_classes=plan.num_classes,
                          in_channels=primary.images.shape[1],
                          image_size=(h, w), scale=plan.net_scale,
                          seed=stream_seed(plan.seed, tag))


def _empty_like(dataset):
    return LabeledDataset(np.zeros((0,) + dataset.images.shape[1:]),
                          np.zeros(0, dtype=np.int64),
                          num_classes=dataset.num_classes)


def _cycle_loop(plan, primary, test_dataset, metrics):
    """Shared online-style loop; returns (evolved net, pool, report)."""
    report = RunReport(strategy=plan.strategy, seed=plan.seed)
    net = _fresh_net(plan, primary, "init")
    pool = _empty_like(primary)
    for cycle_idx in range(plan.cycles):
        synth, _, stats = run_cycle(net, primary, pool, plan, cycle_idx, test_dataset, metrics)
        if len(synth):
            pool = LabeledDataset.concat([pool, synth])
        report.cycles.append(stats)
        if not stopping_check(report, plan.patience):
            report.stopped_early = True
            break
    return net, pool, report


def run_online(plan, primary, test_dataset):
    """All cycles improve one evolving network; its final test accuracy is
    the run's outcome."""
    metrics = MetricsWriter(Path(plan.out_dir) / "metrics.csv" if plan.out_dir else None)
    net, _, report = _cycle_loop(replace(plan, strategy="online"), primary, test_dataset, metrics)
    acc, _ = evaluate(net, test_dataset)
    report.final_accuracy["online"] = acc
    if plan.out_dir:
        net.save(Path(plan.out_dir) / "checkpoint_online.npz")
    return report


def run_offline(plan, primary, test_dataset):
    """Run the cycle loop to accumulate synthesized data, then retrain a
    fresh network from scratch on primary plus everything synthesized. The
    report carries both the evolved (online) and retrained (offline)
    accuracies."""
    metrics = MetricsWriter(Path(plan.out_dir) / "metrics.csv" if plan.out_dir else None)
    net, pool, report = _cycle_loop(replace(plan, strategy="offline"), primary, test_dataset, metrics)
    report.final_accuracy["online"] = evaluate(net, test_dataset)[0]

    fresh = _fresh_net(plan, primary, "offline-init")
    merged = LabeledDataset.concat([primary, pool]) if len(pool) else primary
    _train_phase(fresh, merged, plan.offline_epochs, plan,
                 stream_seed(plan.seed, "offline-train"),
                 test_dataset, metrics, cycle=len(report.cycles), phase="offline")
    acc, loss = evaluate(fresh, test_dataset)
    metrics.row(len(report.cycles), "offline", test_acc=acc, loss=loss)
    report.final_accuracy["offline"] = acc
    if plan.out_dir:
        fresh.save(Path(plan.out_dir) / "checkpoint_offline.npz")
    return report


def run_baseline(plan, primary, test_dataset):
    """Reference point: a fresh network trained on primary data only, with
    the same budget the offline retrain gets."""
    net = _fresh_net(plan, primary, "baseline-init")
    opt = make_optimizer(plan.optimizer, net.params(), plan.learning_rate)
    train(net, primary, plan.offline_epochs, opt, batch_size=plan.batch_size,
          seed=stream_seed(plan.seed, "baseline-train"))
    acc, _ = evaluate(net, test_dataset)
    return net, acc
