"""Monte-Carlo transmission experiments.

For every (SNR, realization) pair one fading trace is drawn and shared by all
methods. Each method then sends the image set back to back over that trace:
an image holds the channel until its payload is delivered or
``horizon_slots`` elapse, and the next image starts in the following slot.

Decoded quality depends only on how many units arrived, so it is computed
once per (image, method, unit count) and looked up during the sweep.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .channel import FadingConfig, RateModel, budget_bits, generate_fading
from .codec_masking import ImportanceRanking, MaskingCodec, decode_current
from .codec_rvq import Projector, ResidualStack, RVQCodec, read_codebook
from .entropy import ScaleTable
from .imageio import ImageBuffer, load_manifest, load_ppm
from .scheduler import (NonProgressive, Policy, ProgressiveMasking, ProgressiveRVQ,
                        first_decode_slot, plan_image)

log = logging.getLogger(__name__)

RANKING_FILE = "ranking.json"
STACK_FILE = "rvq_stack.bin"
PROJECTOR_FILE = "projector.npz"
TABLE_COLUMNS = ["snr_db", "method", "throughput_mpps", "psnr_db", "ssim", "t_avg_ms",
                 "t_p999_ms", "incomplete_fraction", "t_full_avg_ms", "t_full_p999_ms"]


def scales_file(quality: float) -> str:
    return f"scales_q{quality:g}.json"


class MissingArtifact(FileNotFoundError):
    pass


def _policy_from_dict(d: dict) -> Policy:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "progressive_masking":
        return ProgressiveMasking(**d)
    if kind == "progressive_rvq":
        return ProgressiveRVQ(**d)
    if kind == "nonprogressive":
        for key, cast in (("levels", int), ("steps", float)):
            if key in d:
                d[key] = tuple(cast(v) for v in d[key])
        return NonProgressive(**d)
    raise ValueError(f"unknown policy kind {kind!r}")


def _policy_to_dict(p: Policy) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(p).items()}


def default_methods() -> dict[str, Policy]:
    return {"adaptive_baseline": NonProgressive(),
            "progressive_rvq": ProgressiveRVQ(),
            "progressive_masking": ProgressiveMasking()}


@dataclass
class ExperimentConfig:
    snr_grid: tuple[float, ...] = (-10.0, -5.0, 0.0, 5.0)
    n_realizations: int = 1000
    methods: dict = field(default_factory=default_methods)
    manifest: str = "data/desk/manifest.json"
    split: str = "evaluation"
    images: tuple[str, ...] | None = None  # subset of manifest names, None = whole split
    fading: FadingConfig = field(default_factory=FadingConfig)
    rate: RateModel = field(default_factory=RateModel)
    horizon_slots: int = 5000
    base_seed: int = 0
    artifacts: str = "artifacts"
    quality: float = 0.5  # step knob of the progressive masking codec
    block_size: int = 8
    jobs: int = 1
    records_path: str | None = "out/records.jsonl"
    aggregates_path: str | None = "out/aggregates.csv"
    snapshot_path: str | None = "out/snapshot.csv"
    timings_path: str | None = "out/timings.json"
    snapshot_window_ms: float = 300.0
    snapshot_snr_db: float = 0.0

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ValueError("n_realizations must be >= 1")
        if self.horizon_slots < 1:
            raise ValueError("horizon_slots must be >= 1")
        if not self.methods:
            raise ValueError("at least one method required")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "fading" in d:
            d["fading"] = FadingConfig(**d["fading"])
        if "rate" in d:
            d["rate"] = RateModel(**d["rate"])
        if "methods" in d:
            d["methods"] = {k: _policy_from_dict(v) for k, v in d["methods"].items()}
        if "snr_grid" in d:
            d["snr_grid"] = tuple(float(s) for s in d["snr_grid"])
        if d.get("images") is not None:
            d["images"] = tuple(d["images"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = {k: _policy_to_dict(v) for k, v in self.methods.items()}
        d["snr_grid"] = list(self.snr_grid)
        return d


@dataclass
class TransmissionRecord:
    snr_db: float
    method: str
    image: str
    realization: int
    width: int
    height: int
    start_slot: int
    first_decode_slot: int | None
    completion_slot: int | None
    slots_occupied: int
    bits_sent: int
    trajectory: list  # [(slot, psnr_db, ssim), ...] relative to start_slot

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TransmissionRecord":
        d = json.loads(line)
        d["trajectory"] = [tuple(t) for t in d["trajectory"]]
        return cls(**d)


@dataclass
class Ladder:
    """Payload of one (image, method) pair and the quality after each decode step."""

    sizes: list[int]
    psnr: list[float]
    ssim: list[float]
    encode_s: float = 0.0
    decode_s: float = 0.0
    settings: list = field(default_factory=list)  # baseline: (keep, step) per level


@dataclass
class Artifacts:
    masking: dict  # quality -> MaskingCodec
    rvq: RVQCodec | None


def derive_seed(base_seed: int, snr_index: int, realization: int) -> int:
    """64-bit seed from a splittable mix of the three integers."""
    ss = np.random.SeedSequence(base_seed, spawn_key=(snr_index, realization))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


# -- artifacts and ladders ---------------------------------------------------

def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing trained artifact: {path}")
    return path


def load_artifacts(config: ExperimentConfig) -> Artifacts:
    root = Path(config.artifacts)
    masking, rvq = {}, None
    qualities = set()
    for p in config.methods.values():
        if isinstance(p, ProgressiveMasking):
            qualities.add(config.quality)
        elif isinstance(p, NonProgressive):
            qualities.update(p.steps)
    if qualities:
        ranking = ImportanceRanking.from_json(_need(root / RANKING_FILE).read_text())
        for q in sorted(qualities):
            table = ScaleTable.from_json(_need(root / scales_file(q)).read_text())
            masking[q] = MaskingCodec(table, ranking, config.block_size)
    if any(isinstance(p, ProgressiveRVQ) for p in config.methods.values()):
        stack = read_codebook(_need(root / STACK_FILE))
        if not isinstance(stack, ResidualStack):
            raise ValueError(f"{root / STACK_FILE} holds a single codebook, not a residual stack")
        projector = None
        if (root / PROJECTOR_FILE).exists():
            projector = Projector.from_npz(root / PROJECTOR_FILE)
        rvq = RVQCodec(stack, projector, config.block_size)
    return Artifacts(masking, rvq)


def build_ladder(image: ImageBuffer, policy: Policy, art: Artifacts, quality: float) -> Ladder:
    if isinstance(policy, ProgressiveMasking):
        codec = art.masking[quality]
        n = min(policy.n_max, len(codec.table))
        t0 = time.perf_counter()
        packets = codec.encode(image, policy.group_size, n_channels=n)
        t1 = time.perf_counter()
        sizes = [p.n_bits for p in packets]
        sizes[0] += codec.table.side_info_bits(n)
        state = codec.receiver(image)
        psnrs, ssims = [], []
        dec = 0.0
        for p in packets:
            t = time.perf_counter()
            state.update(p)
            out = decode_current(state)
            dec += time.perf_counter() - t
            psnrs.append(metrics.psnr(image, out))
            ssims.append(metrics.ssim(image, out))
        return Ladder(sizes, psnrs, ssims, t1 - t0, dec)
    if isinstance(policy, ProgressiveRVQ):
        codec = art.rvq
        if codec.stack.bpi != policy.bpi:
            raise ValueError(f"policy bpi {policy.bpi} does not match trained stack bpi "
                             f"{codec.stack.bpi}")
        m = min(policy.m_max, codec.stack.m_max)
        t0 = time.perf_counter()
        tokens = codec.encode(image, m)
        t1 = time.perf_counter()
        stage = codec.stage_bits(image.width, image.height)
        psnrs, ssims, dec = [], [], 0.0
        for k in range(1, m + 1):
            t = time.perf_counter()
            out = codec.decode(tokens, image.width, image.height, k)
            dec += time.perf_counter() - t
            psnrs.append(metrics.psnr(image, out))
            ssims.append(metrics.ssim(image, out))
        return Ladder([stage] * m, psnrs, ssims, t1 - t0, dec)
    return baseline_ladder(image, policy, art)


def baseline_ladder(image: ImageBuffer, policy: NonProgressive, art: Artifacts) -> Ladder:
    """Rate-controlled one-shot ladder.

    Every (keep, step) pair in the policy grid is encoded; each level takes
    the best-PSNR stream within its bit target. A level whose pick repeats
    the previous one is dropped. If even the smallest stream overshoots the
    first target, that stream becomes the only level.
    """
    top = policy.levels[-1]
    cands = []  # (size, psnr, ssim, keep, step)
    enc = dec = 0.0
    for q in policy.steps:
        codec = art.masking[q]
        for keep in range(1, min(policy.max_keep, len(codec.table)) + 1):
            t0 = time.perf_counter()
            packets = codec.encode(image, group_size=keep, n_channels=keep)
            enc += time.perf_counter() - t0
            size = packets[0].n_bits + codec.table.side_info_bits(keep)
            if size > top and cands:
                break  # sizes grow with keep
            t0 = time.perf_counter()
            out = codec.decode(packets, image.width, image.height)
            dec += time.perf_counter() - t0
            cands.append((size, metrics.psnr(image, out), metrics.ssim(image, out), keep, q))
    picks = []
    for target in policy.levels:
        fit = [c for c in cands if c[0] <= target]
        if not fit:
            continue
        best = max(fit, key=lambda c: (c[1], -c[0]))
        if picks and best[0] <= picks[-1][0]:
            continue
        picks.append(best)
    if not picks:
        picks = [min(cands)]
    return Ladder([c[0] for c in picks], [c[1] for c in picks], [c[2] for c in picks],
                  enc, dec, [(c[3], c[4]) for c in picks])


# -- sweep -------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(state: dict):
    _WORKER.clear()
    _WORKER.update(state)


def _trace_budgets(config: ExperimentConfig, snr_index: int, realization: int,
                   n_slots: int) -> tuple[np.ndarray, np.ndarray]:
    fcfg = replace(config.fading, avg_snr_db=config.snr_grid[snr_index],
                   seed=derive_seed(config.base_seed, snr_index, realization))
    trace = generate_fading(fcfg, n_slots)
    return trace.gains, budget_bits(trace.gain_power, fcfg, config.rate)


def _run_unit(snr_index: int, realization: int) -> list[TransmissionRecord]:
    config: ExperimentConfig = _WORKER["config"]
    ladders: dict = _WORKER["ladders"]
    images: list = _WORKER["images"]
    h = config.horizon_slots
    _, budgets = _trace_budgets(config, snr_index, realization, h * len(images))
    snr = config.snr_grid[snr_index]
    out = []
    for method, policy in config.methods.items():
        cursor = 0
        for name, w, ht in images:
            ladder = ladders[(name, method)]
            plan = plan_image(policy, ladder.sizes, budgets[cursor:cursor + h])
            first = first_decode_slot(plan)
            traj = []
            for slot, units in zip(plan.decode_slots, plan.decode_units):
                traj.append((slot, ladder.psnr[units - 1], ladder.ssim[units - 1]))
            occupied = plan.slots_occupied()
            out.append(TransmissionRecord(
                snr, method, name, realization, w, ht, cursor, first,
                plan.decode_slots[-1] if plan.complete else None,
                occupied, int(plan.bits_used[:occupied].sum()), traj))
            cursor += occupied
    return out


@dataclass
class ExperimentResult:
    records: list[TransmissionRecord]
    table: list[dict]
    ladders: dict
    timings: dict


def _sort_key(r: TransmissionRecord, methods: Sequence[str], images: Sequence[str]):
    return (r.snr_db, methods.index(r.method), images.index(r.image), r.realization)


def prepare(config: ExperimentConfig):
    corpus = load_manifest(config.manifest)
    entries = corpus.split(config.split)
    if config.images is not None:
        wanted = set(config.images)
        entries = [e for e in corpus.entries if e.name in wanted]
        missing = wanted - {e.name for e in entries}
        if missing:
            raise ValueError(f"images not in manifest: {sorted(missing)}")
    if not entries:
        raise ValueError("no images selected")
    loaded = [(e.name, load_ppm(e.path)) for e in entries]
    art = load_artifacts(config)
    ladders = {}
    for name, img in loaded:
        for method, policy in config.methods.items():
            ladders[(name, method)] = build_ladder(img, policy, art, config.quality)
    return loaded, ladders


def run_experiment(config: ExperimentConfig, prepared=None) -> ExperimentResult:
    loaded, ladders = prepare(config) if prepared is None else prepared
    images = [(n, im.width, im.height) for n, im in loaded]
    state = {"config": config, "ladders": ladders, "images": images}
    units = [(s, r) for s in range(len(config.snr_grid)) for r in range(config.n_realizations)]
    records: list[TransmissionRecord] = []
    if config.jobs <= 1:
        _init_worker(state)
        for s, r in units:
            records.extend(_run_unit(s, r))
    else:
        with ProcessPoolExecutor(config.jobs, initializer=_init_worker, initargs=(state,)) as ex:
            for chunk in ex.map(_run_unit, *zip(*units), chunksize=max(1, len(units) // (4 * config.jobs))):
                records.extend(chunk)
    methods = list(config.methods)
    names = [n for n, _, _ in images]
    records.sort(key=lambda r: _sort_key(r, methods, names))
    table = aggregate(records, config)
    timings = {f"{n}/{m}": {"encode_s": lad.encode_s, "decode_s": lad.decode_s}
               for (n, m), lad in ladders.items()}
    return ExperimentResult(records, table, ladders, timings)


def aggregate(records: Sequence[TransmissionRecord], config: ExperimentConfig) -> list[dict]:
    ts_ms = config.fading.slot_s * 1e3
    rows = []
    for snr in config.snr_grid:
        for method in config.methods:
            group = [r for r in records if r.snr_db == snr and r.method == method]
            if not group:
                continue
            horizon_s = sum(r.slots_occupied for r in group) * config.fading.slot_s
            decoded = [r for r in group if r.trajectory]
            first = metrics.wait_stats(
                [None if r.first_decode_slot is None else (r.first_decode_slot + 1) * ts_ms
                 for r in group])
            full = metrics.wait_stats(
                [None if r.completion_slot is None else (r.completion_slot + 1) * ts_ms
                 for r in group])
            rows.append({
                "snr_db": snr,
                "method": method,
                "throughput_mpps": metrics.throughput_mpps(group, horizon_s),
                "psnr_db": (math.fsum(r.trajectory[-1][1] for r in decoded) / len(decoded)
                            if decoded else None),
                "ssim": (math.fsum(r.trajectory[-1][2] for r in decoded) / len(decoded)
                         if decoded else None),
                "t_avg_ms": first.t_avg_ms,
                "t_p999_ms": first.t_p999_ms,
                "incomplete_fraction": first.incomplete_fraction,
                "t_full_avg_ms": full.t_avg_ms,
                "t_full_p999_ms": full.t_p999_ms,
            })
    return rows


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    return f"{v:.6f}"


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in TABLE_COLUMNS])
    return buf.getvalue()


def _atomic_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def snapshot_trace(config: ExperimentConfig, window_ms: float | None = None,
                   result: ExperimentResult | None = None, snr_db: float | None = None
                   ) -> list[dict]:
    """Per-slot |h|, budget, and each method's displayed PSNR and waiting time.

    Uses realization 0 at ``snr_db``. PSNR holds the last decoded value of the
    image currently on air; "-" marks slots where that image has nothing
    decodable yet.
    """
    window_ms = config.snapshot_window_ms if window_ms is None else window_ms
    snr_db = config.snapshot_snr_db if snr_db is None else snr_db
    n = int(round(window_ms / (config.fading.slot_s * 1e3)))
    if n > config.horizon_slots:
        raise ValueError("snapshot window exceeds the per-image horizon")
    if snr_db not in config.snr_grid:
        raise ValueError(f"snapshot SNR {snr_db} not in the grid")
    snr_index = list(config.snr_grid).index(snr_db)
    if result is None:
        # keep the full grid so the SNR index, and hence the seed, is unchanged
        result = run_experiment(replace(config, n_realizations=1, jobs=1))
    images = sorted({r.image for r in result.records})
    gains, budgets = _trace_budgets(config, snr_index, 0,
                                    config.horizon_slots * max(1, len(images)))
    rows = [{"slot": s, "time_ms": s * config.fading.slot_s * 1e3,
             "abs_h": float(abs(gains[s])), "n_bits": int(budgets[s])} for s in range(n)]
    ts_ms = config.fading.slot_s * 1e3
    for method in config.methods:
        recs = sorted((r for r in result.records
                       if r.method == method and r.realization == 0 and r.snr_db == snr_db),
                      key=lambda r: r.start_slot)
        k = 0
        for s in range(n):
            while k < len(recs) and s >= recs[k].start_slot + recs[k].slots_occupied:
                k += 1
            if k >= len(recs):
                rows[s][f"psnr_{method}"] = "-"
                rows[s][f"wait_ms_{method}"] = "-"
                continue
            rec = recs[k]
            rel = s - rec.start_slot
            shown = [t for t in rec.trajectory if t[0] <= rel]
            rows[s][f"psnr_{method}"] = shown[-1][1] if shown else "-"
            rows[s][f"wait_ms_{method}"] = (rel + 1) * ts_ms
    return rows


def snapshot_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols)
    for row in rows:
        w.writerow([row[c] if isinstance(row[c], (int, str)) else _fmt(row[c]) for c in cols])
    return buf.getvalue()


def write_outputs(config: ExperimentConfig, result: ExperimentResult) -> list[Path]:
    written = []
    if config.records_path:
        _atomic_text(config.records_path, "".join(r.to_json() + "\n" for r in result.records))
        written.append(Path(config.records_path))
    if config.aggregates_path:
        _atomic_text(config.aggregates_path, table_csv(result.table))
        written.append(Path(config.aggregates_path))
    if config.snapshot_path and config.snapshot_snr_db in config.snr_grid:
        rows = snapshot_trace(config, result=result)
        _atomic_text(config.snapshot_path, snapshot_csv(rows))
        written.append(Path(config.snapshot_path))
    if config.timings_path:
        _atomic_text(config.timings_path, json.dumps(result.timings, indent=1, sort_keys=True))
        written.append(Path(config.timings_path))
    return written
