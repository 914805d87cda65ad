"""Training loop for the MNIST perceptron on crossbar arrays, plus evaluation."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import crossbar as cb
from . import rng
from .config import TrainingConfig
from .counters import EventCounters, total
from .crossbar import CrossbarArray, quantize_rows
from .data import DatasetBundle
from .io import write_csv
from .metrics import accuracy
from .nn import DenseLayer, ExactWeights, activation, mlp_forward_backward
from .optim import ChiAccumulator, accumulate, compute_update_lowprec, flush, sgd_momentum_step

log = logging.getLogger(__name__)

EPOCH_HEADER = ("epoch", "train_acc", "test_acc", "loss", "set_pulses", "reset_pulses", "chi_writes",
                "sim_time_s")
DRIFT_HEADER = ("t_s", "train_acc", "test_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    test_acc: float
    loss: float
    counters: EventCounters
    wall_time_s: float
    sim_time_s: float

    def row(self):
        c = self.counters
        return (self.epoch, self.train_acc, self.test_acc, self.loss, c.set_pulses, c.reset_pulses,
                c.chi_writes, self.sim_time_s)


@dataclass
class ExperimentLog:
    records: list[EpochRecord] = field(default_factory=list)
    config_digest: str = ""

    def append(self, rec: EpochRecord):
        expected = len(self.records) + 1
        if rec.epoch != expected:
            raise TrainingError(f"epoch {rec.epoch} logged out of order (expected {expected})")
        self.records.append(rec)

    @property
    def test_acc(self) -> list[float]:
        return [r.test_acc for r in self.records]

    @property
    def max_test_acc(self) -> float:
        return max(self.test_acc)

    def device_updates_per_epoch(self) -> list[int]:
        """SET plus RESET pulses issued during each epoch (cumulative counters differenced)."""
        out, prev = [], EventCounters()
        for r in self.records:
            out.append((r.counters - prev).device_updates)
            prev = r.counters
        return out

    def write_csv(self, path):
        write_csv(path, EPOCH_HEADER, [r.row() for r in self.records], self.config_digest)

    def as_dict(self) -> list[dict]:
        return [{**dict(zip(EPOCH_HEADER, r.row())), "wall_time_s": r.wall_time_s,
                 "counters": r.counters.as_dict()} for r in self.records]


@dataclass
class Network:
    layers: list[DenseLayer]
    mode: str

    @property
    def backends(self):
        return [layer.backend for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    @property
    def counters(self) -> EventCounters:
        if self.mode != "mca":
            return EventCounters()
        return total(b.counters for b in self.backends)

    def weights(self, t_now: float) -> list[np.ndarray]:
        """Fresh-read weight snapshot (exact mode returns the stored matrices)."""
        if self.mode == "mca":
            return [b.effective_weights(t_now, "fresh") for b in self.backends]
        return [b.W.copy() for b in self.backends]


@dataclass
class TrainResult:
    log: ExperimentLog
    network: Network
    t_end: float
    chi_writes_per_example: float
    nonzero_update_fraction: float
    checkpoint: Path | None = None
    epoch_csv: Path | None = None

    @property
    def arrays(self) -> list[CrossbarArray]:
        return self.network.backends if self.network.mode == "mca" else []


# -- network construction ----------------------------------------------------


def build_network(cfg: TrainingConfig) -> Network:
    a, n = cfg.array, cfg.network
    seed = cfg.trainer.seed
    sizes = list(n.sizes)
    acts = [n.activation] * (len(sizes) - 2) + [n.output_activation]
    layers = []
    id_base = 0
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        rows = n_in + 1
        if n.mode == "exact":
            mean, std = a.init_stats()
            w_std = n.init_std if n.init_std is not None else math.sqrt(2.0) * std / a.g_scale
            g = rng.generator(seed, rng.NETWORK_INIT, k)
            backend = ExactWeights(g.normal(0.0, w_std, size=(rows, n_out)), a.dac_bits, a.adc_bits)
        else:
            mean, std = a.init_stats()
            policy = cb.ReadPolicy(a.read_policy, a.read_subset_pairs if k == 0 else None)
            reference = a.reference if a.reference in cb.REFERENCE_MEANS else float(a.reference)
            backend, report = cb.init_array(
                rows, n_out, a.scheme, mean, std, cfg.model, seed, margin=a.init_margin,
                max_iter=a.init_max_iter, g_scale=a.g_scale, dac_bits=a.dac_bits, adc_bits=a.adc_bits,
                weight_clip=a.clip_for_epoch(1), reference=reference,
                g_range=(a.g_range_low, a.g_range_high), read_policy=policy, id_base=id_base,
                t_now=-cfg.trainer.init_settle_s)
            backend.read_all(0.0)
            id_base += backend.n_devices
            # initialization pulses are not training events
            backend.counters = EventCounters()
            log.info("layer %d init: %d devices, %.1f%% converged, %d targets clipped", k,
                     report.n_devices, 100 * report.convergence_rate, report.clipped_targets)
        layers.append(DenseLayer(backend, acts[k]))
    if n.mode == "mca" and a.scheme == "reference" and a.reference == "network-mean":
        cb.ReferenceGroup([l.backend for l in layers])
    return Network(layers, n.mode)


# -- evaluation ---------------------------------------------------------------


def predict(weights: list[np.ndarray], x: np.ndarray, activations: list[str], dac_bits: int | None,
            adc_bits: int | None, chunk: int = 10000) -> np.ndarray:
    """Batched forward pass with per-vector DAC/ADC quantization; returns class indices."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        a = x[s:s + chunk]
        for W, act in zip(weights, activations):
            a = np.hstack([a, np.ones((a.shape[0], 1))])
            z = quantize_rows(quantize_rows(a, dac_bits) @ W, adc_bits)
            a = activation(act, z)
        out[s:s + chunk] = np.argmax(a, axis=1)
    return out


def evaluate(weights, dataset: DatasetBundle, activations, dac_bits, adc_bits,
             train: bool = True) -> tuple[float, float]:
    test = accuracy(predict(weights, dataset.test_x, activations, dac_bits, adc_bits), dataset.test_y)
    tr = math.nan
    if train:
        tr = accuracy(predict(weights, dataset.train_x, activations, dac_bits, adc_bits), dataset.train_y)
    return tr, test


def last_programming_time(arrays: list[CrossbarArray]) -> float:
    return max(float(pl.t_prog.max()) for a in arrays for pl in a.planes)


def evaluate_inference_over_time(arrays: list[CrossbarArray], dataset: DatasetBundle, times,
                                 activations: list[str], eval_train: bool = True) -> list[tuple]:
    """Accuracy of fresh weight reads at each absolute time; nothing is programmed."""
    times = [float(t) for t in times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise TrainingError("evaluation times must be strictly increasing")
    t_last = last_programming_time(arrays)
    if times and times[0] < t_last:
        raise TrainingError(f"evaluation time {times[0]} precedes the last programming event at {t_last}")
    rows = []
    for t in times:
        w = [a.effective_weights(t, "fresh") for a in arrays]
        tr, te = evaluate(w, dataset, activations, arrays[0].dac_bits, arrays[0].adc_bits, eval_train)
        rows.append((t, tr, te))
    return rows


def without_drift(arrays: list[CrossbarArray]) -> list[CrossbarArray]:
    """Copies of ``arrays`` whose devices no longer drift."""
    out = copy.deepcopy(list(arrays))  # one call, so shared reference groups stay shared
    for c in out:
        for pl in c.planes:
            pl.nu[:] = 0.0
    return out


# -- training -------------------------------------------------------------------


def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    t = np.zeros((labels.size, n))
    t[np.arange(labels.size), labels] = 1.0
    return t


def train_mca(cfg: TrainingConfig, dataset: DatasetBundle, out_dir=None, progress=None) -> TrainResult:
    """Train the configured network; ``mode = exact`` runs the same loop on real weights.

    Per example: forward, error, backward, update computation, accumulation,
    flush to the arrays, re-read per the read policy, periodic refresh, and a
    clock advance of ``dt_example``.  Each epoch ends with a fresh read of all
    devices and an evaluation on the train and test sets.
    """
    cfg.validate()
    a, o, tr = cfg.array, cfg.optimizer, cfg.trainer
    net = build_network(cfg)
    mca = net.mode == "mca"
    layers = net.layers
    n_layers = len(layers)
    x_train = dataset.train_x
    n_classes = cfg.network.sizes[-1]
    if x_train.shape[1] != cfg.network.sizes[0]:
        raise TrainingError(f"dataset has {x_train.shape[1]} features, network expects {cfg.network.sizes[0]}")
    if x_train.shape[0] == 0:
        raise TrainingError("empty training set")
    targets = _one_hot(dataset.train_y, n_classes)

    eps_d = o.eps_d_for(a.scheme)
    accs = [ChiAccumulator.zeros((l.backend.rows, l.backend.cols), o.eps_p, eps_d, pulse_cap=o.pulse_cap)
            for l in layers] if mca else []
    simple = o.batch_size == 1 and o.momentum == 0.0
    grads = [np.zeros((l.backend.rows, l.backend.cols)) for l in layers] if not simple else []
    velocity = [None] * n_layers
    refresh_policy = cb.RefreshPolicy(a.refresh_period, a.refresh_g_high, a.refresh_g_diff, a.refresh_max_set,
                                      a.refresh_pulse_unit, a.refresh_distributed)
    do_refresh = mca and a.scheme == "differential" and a.refresh
    n_weights = sum(l.backend.rows * l.backend.cols for l in layers)

    run_log = ExperimentLog(config_digest=cfg.digest())
    dt = tr.dt_example
    count = 0
    t = 0.0
    chi_writes = 0
    nonzero = 0
    in_batch = 0
    for epoch in range(1, tr.epochs + 1):
        t0 = time.perf_counter()
        clip = a.clip_for_epoch(epoch)
        if mca and clip is not None:
            for l in layers:
                l.backend.weight_clip = clip
        order = rng.generator(tr.seed, rng.DATA_ORDER, epoch).permutation(x_train.shape[0])
        loss_sum = 0.0
        for idx in order:
            count += 1
            t = count * dt
            fb = mlp_forward_backward(layers, x_train[idx], targets[idx], cfg.network.loss, t)
            if not math.isfinite(fb.loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, example {int(idx)}")
            loss_sum += fb.loss
            in_batch += 1
            boundary = in_batch == o.batch_size
            for k, l in enumerate(layers):
                eta = o.eta if simple else 1.0
                upd = compute_update_lowprec(fb.xs[k], fb.deltas[k], eta, o.update_bits)
                nonzero += upd.nnz
                if simple:
                    if mca:
                        w = accumulate(accs[k], upd)
                        l.backend.counters.chi_writes += w
                        chi_writes += w
                    else:
                        upd.add_to(l.backend.W)
                else:
                    upd.add_to(grads[k])
                    if boundary:
                        g = -grads[k] / in_batch
                        velocity[k], step = sgd_momentum_step(velocity[k], g, o.eta, o.momentum)
                        grads[k][:] = 0.0
                        if mca:
                            w = accumulate(accs[k], step)
                            l.backend.counters.chi_writes += w
                            chi_writes += w
                        else:
                            l.backend.W += step
            if boundary:
                in_batch = 0
            if mca and (boundary or o.flush == "example"):
                for k, l in enumerate(layers):
                    ev = flush(accs[k], l.backend, t)
                    l.backend.sync(t, len(ev) > 0)
            if do_refresh and refresh_policy.due(count):
                for l in layers:
                    rep = l.backend.refresh(refresh_policy, t)
                    if rep.refreshed:
                        l.backend.sync(t, True)
        wall = time.perf_counter() - t0
        w_eval = net.weights(t)
        train_acc, test_acc = evaluate(w_eval, dataset, net.activations, a.dac_bits, a.adc_bits,
                                       tr.eval_train)
        rec = EpochRecord(epoch, train_acc, test_acc, loss_sum / len(order), net.counters.snapshot(),
                          wall, t)
        run_log.append(rec)
        log.info("epoch %d: train %.4f test %.4f loss %.4f updates %d (%.1fs)", epoch, train_acc, test_acc,
                 rec.loss, rec.counters.device_updates, wall)
        if progress is not None:
            progress(rec)

    result = TrainResult(run_log, net, t, chi_writes / max(count, 1), nonzero / max(count, 1) / n_weights)
    if out_dir is not None:
        out = Path(out_dir)
        result.epoch_csv = out / cfg.output.log_csv
        run_log.write_csv(result.epoch_csv)
        result.checkpoint = out / cfg.output.checkpoint
        save_result(result, cfg, result.checkpoint)
    return result


def save_result(result: TrainResult, cfg: TrainingConfig, path):
    extra = {"config": cfg.to_ini(), "config_digest": cfg.digest(), "t_end": result.t_end,
             "mode": result.network.mode, "activations": result.network.activations,
             "log": result.log.as_dict()}
    dense = {} if result.network.mode == "mca" else {f"W{k}": b.W for k, b in enumerate(result.network.backends)}
    cb.save_checkpoint(path, result.arrays, extra, dense=dense)
