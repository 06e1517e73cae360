"""Command-line front end.

    progtx rank-channels   [--config cfg.json] [--manifest M] [--artifacts DIR]
    progtx train-codebooks [--config cfg.json] [--seed N]
    progtx simulate        [--config cfg.json] [--snr-grid -10,-5,0,5] [--jobs N] [--seed N]
    progtx encode  IMAGE OUT --method masking|rvq [--keep K | --stages M]
    progtx decode  STREAM OUT.ppm
    progtx metrics REF.ppm TEST.ppm

A single JSON file configures every subcommand; flags override it. The
default corpus is ``$PROGTX_DATA/desk/manifest.json`` (``data/`` when unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics
from .codec_masking import ImportanceRanking, MaskedPacket, MaskingCodec
from .codec_rvq import (Projector, ResidualStack, RVQCodec, fit_projector, parse_token_packet,
                        read_codebook, token_packet, train_codebook_family, train_residual_stack,
                        training_patches, write_codebook, TokenMap)
from .entropy import ScaleTable, estimate_scales
from .imageio import ImageBuffer, load_manifest, load_ppm, save_ppm, default_data_root
from .observer import rank_channels
from .scheduler import NonProgressive
from .simulator import (PROJECTOR_FILE, RANKING_FILE, STACK_FILE, ExperimentConfig,
                        _atomic_text, run_experiment, scales_file, write_outputs)

log = logging.getLogger("progtx")

DEFAULTS = {
    "manifest": None,  # resolved against PROGTX_DATA
    "artifacts": "artifacts",
    "seed": 0,
    "jobs": 1,
    "block_size": 8,
    "quality": 0.5,
    "train": {"bpi": 8, "stages": 10, "project_dim": 4, "stride": 2, "family_stride": 1,
              "large_size": 16384, "family_bpi": [8, 9, 10, 11, 12, 13, 14], "max_iters": 100},
    "simulate": {},
}

STREAM_HEADER = struct.Struct("<4sHHd")  # magic, width, height, step knob
MASKING_MAGIC = b"PTXM"
RVQ_MAGIC = b"PTXR"


class CLIError(Exception):
    pass


# -- config ------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is None:
        return cfg
    text = Path(path).read_text()
    try:
        user = json.loads(text)
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(user, dict):
        raise CLIError(f"{path}: top level must be a JSON object")
    for k, v in user.items():
        if k not in cfg:
            raise CLIError(f"{path}: unknown config key {k!r}")
        if isinstance(cfg[k], dict) and isinstance(v, dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    return cfg


def _apply_flags(cfg: dict, args) -> dict:
    for key in ("manifest", "artifacts", "seed", "jobs"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg["manifest"] is None:
        cfg["manifest"] = str(default_data_root() / "desk" / "manifest.json")
    return cfg


def _calibration(cfg: dict) -> list[ImageBuffer]:
    path = Path(cfg["manifest"])
    if not path.exists():
        raise CLIError(f"corpus manifest not found: {path}")
    images = [im for _, im in load_manifest(path).load("calibration")]
    if not images:
        raise CLIError(f"{path}: no calibration images")
    return images


def _qualities(cfg: dict) -> list[float]:
    """Step knobs that need a scale table: the progressive codec plus every baseline level."""
    qs = {float(cfg["quality"])}
    sim = experiment_config(cfg)
    for p in sim.methods.values():
        if isinstance(p, NonProgressive):
            qs.update(p.steps)
    return sorted(qs)


def experiment_config(cfg: dict) -> ExperimentConfig:
    d = dict(cfg["simulate"])
    d.setdefault("manifest", cfg["manifest"])
    d.setdefault("artifacts", cfg["artifacts"])
    d.setdefault("quality", cfg["quality"])
    d.setdefault("block_size", cfg["block_size"])
    d["base_seed"] = cfg["seed"] if "base_seed" not in cfg["simulate"] else d["base_seed"]
    d["jobs"] = cfg["jobs"]
    return ExperimentConfig.from_dict(d)


# -- commands ----------------------------------------------------------------

def cmd_rank_channels(cfg: dict) -> list[Path]:
    images = _calibration(cfg)
    b = cfg["block_size"]
    out = Path(cfg["artifacts"])
    ranking = rank_channels(images, b)
    codec = MaskingCodec(ScaleTable(np.ones(3 * b * b), np.ones(3 * b * b)), ranking, b)
    latents = [codec.latent(im) for im in images]
    written = [out / RANKING_FILE]
    _atomic_text(written[0], ranking.to_json())
    for q in _qualities(cfg):
        path = out / scales_file(q)
        _atomic_text(path, estimate_scales(latents, q).to_json())
        written.append(path)
    return written


def cmd_train_codebooks(cfg: dict) -> list[Path]:
    images = _calibration(cfg)
    t = cfg["train"]
    out = Path(cfg["artifacts"])
    out.mkdir(parents=True, exist_ok=True)
    b, seed = cfg["block_size"], int(cfg["seed"])
    dense = training_patches(images, b, t["family_stride"])
    sparse = training_patches(images, b, t["stride"])
    projector = None
    if t["project_dim"]:
        projector = fit_projector(dense, t["project_dim"], seed=seed)
        dense, sparse = projector.project(dense), projector.project(sparse)
    stack = train_residual_stack(sparse, t["stages"], t["bpi"], seed=seed,
                                 max_iters=t["max_iters"])
    written = [out / STACK_FILE]
    write_codebook(written[0], stack)
    if projector is not None:
        projector.to_npz(out / PROJECTOR_FILE)
        written.append(out / PROJECTOR_FILE)
    elif (out / PROJECTOR_FILE).exists():
        (out / PROJECTOR_FILE).unlink()
    if t["family_bpi"]:
        large, family = train_codebook_family(dense, t["family_bpi"], t["large_size"],
                                              max_iters=t["max_iters"], seed=seed)
        written.append(out / "codebook_large.bin")
        write_codebook(written[-1], large)
        for bpi, cb in sorted(family.items()):
            path = out / f"codebook_bpi{bpi}.bin"
            write_codebook(path, cb)
            written.append(path)
    return written


def cmd_simulate(cfg: dict, snr_grid=None) -> list[Path]:
    config = experiment_config(cfg)
    if snr_grid is not None:
        config = replace(config, snr_grid=tuple(snr_grid))
    result = run_experiment(config)
    return write_outputs(config, result)


def _masking_codec(cfg: dict, quality: float) -> MaskingCodec:
    root = Path(cfg["artifacts"])
    for name in (RANKING_FILE, scales_file(quality)):
        if not (root / name).exists():
            raise CLIError(f"missing trained artifact: {root / name}")
    ranking = ImportanceRanking.from_json((root / RANKING_FILE).read_text())
    table = ScaleTable.from_json((root / scales_file(quality)).read_text())
    return MaskingCodec(table, ranking, cfg["block_size"])


def _rvq_codec(cfg: dict) -> RVQCodec:
    root = Path(cfg["artifacts"])
    if not (root / STACK_FILE).exists():
        raise CLIError(f"missing trained artifact: {root / STACK_FILE}")
    stack = read_codebook(root / STACK_FILE)
    if not isinstance(stack, ResidualStack):
        raise CLIError(f"{root / STACK_FILE}: not a residual stack")
    proj = Projector.from_npz(root / PROJECTOR_FILE) if (root / PROJECTOR_FILE).exists() else None
    return RVQCodec(stack, proj, cfg["block_size"])


def _frame(chunks: list[bytes]) -> bytes:
    return b"".join(struct.pack("<I", len(c)) + c for c in chunks)


def _unframe(raw: bytes, off: int) -> list[bytes]:
    out = []
    while off < len(raw):
        if off + 4 > len(raw):
            raise CLIError("truncated stream file")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + n > len(raw):
            raise CLIError("truncated stream file")
        out.append(raw[off:off + n])
        off += n
    return out


def cmd_encode(cfg: dict, image_path, out_path, method: str, keep: int | None,
               stages: int | None, group_size: int = 4) -> list[Path]:
    image = load_ppm(image_path)
    q = float(cfg["quality"])
    if method == "masking":
        codec = _masking_codec(cfg, q)
        n = len(codec.table) if keep is None else keep
        if not 0 <= n <= len(codec.table):
            raise CLIError(f"keep must be in [0, {len(codec.table)}]")
        packets = codec.encode(image, group_size, n_channels=n) if n else []
        head = STREAM_HEADER.pack(MASKING_MAGIC, image.width, image.height, q)
        body = _frame([p.to_bytes() for p in packets])
    elif method == "rvq":
        codec = _rvq_codec(cfg)
        m = codec.stack.m_max if stages is None else stages
        if not 1 <= m <= codec.stack.m_max:
            raise CLIError(f"stages must be in [1, {codec.stack.m_max}]")
        tokens = codec.encode(image, m)
        head = STREAM_HEADER.pack(RVQ_MAGIC, image.width, image.height, 0.0)
        body = _frame([token_packet(0, s, tokens.bpi, tokens.indices[:, s]) for s in range(m)])
    else:
        raise CLIError(f"unknown method {method!r}")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(out) + ".tmp")
    tmp.write_bytes(head + body)
    tmp.replace(out)
    return [out]


def decode_file(cfg: dict, stream_path) -> ImageBuffer:
    raw = Path(stream_path).read_bytes()
    if len(raw) < STREAM_HEADER.size:
        raise CLIError(f"{stream_path}: stream file too short")
    magic, w, h, q = STREAM_HEADER.unpack_from(raw)
    chunks = _unframe(raw, STREAM_HEADER.size)
    if magic == MASKING_MAGIC:
        codec = _masking_codec(cfg, q)
        return codec.decode([MaskedPacket.from_bytes(c) for c in chunks], w, h)
    if magic == RVQ_MAGIC:
        codec = _rvq_codec(cfg)
        if not chunks:
            raise CLIError(f"{stream_path}: no token packets")
        parsed = [parse_token_packet(c) for c in chunks]
        if [p[1] for p in parsed] != list(range(len(parsed))):
            raise CLIError(f"{stream_path}: token stages out of order")
        grid = (-(-h // codec.patch), -(-w // codec.patch))
        tokens = TokenMap(np.stack([p[3] for p in parsed], axis=1), parsed[0][2], grid)
        return codec.decode(tokens, w, h)
    raise CLIError(f"{stream_path}: unknown stream magic {magic!r}")


def cmd_decode(cfg: dict, stream_path, out_path) -> list[Path]:
    save_ppm(decode_file(cfg, stream_path), out_path)
    return [Path(out_path)]


def cmd_metrics(reference, test) -> dict:
    r = metrics.quality(load_ppm(reference), load_ppm(test))
    return {"mse": r.mse, "psnr_db": r.psnr_db, "ssim": r.ssim}


# -- argument parsing --------------------------------------------------------

def _snr_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progtx", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--manifest", help="corpus manifest JSON")
        sp.add_argument("--artifacts", help="directory of trained artifacts")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int)
        return sp

    common(sub.add_parser("train-codebooks", help="train RVQ stack and codebook family"))
    common(sub.add_parser("rank-channels", help="rank channels and fit scale tables"))
    sim = common(sub.add_parser("simulate", help="run the transmission experiment"))
    sim.add_argument("--snr-grid", type=_snr_list, help="comma separated SNRs in dB")
    enc = common(sub.add_parser("encode", help="encode one image"))
    enc.add_argument("image")
    enc.add_argument("output")
    enc.add_argument("--method", choices=("masking", "rvq"), default="masking")
    enc.add_argument("--keep", type=int, help="channels kept (masking)")
    enc.add_argument("--stages", type=int, help="RVQ stages")
    enc.add_argument("--group-size", type=int, default=4)
    dec = common(sub.add_parser("decode", help="decode a stream written by encode"))
    dec.add_argument("stream")
    dec.add_argument("output")
    met = sub.add_parser("metrics", help="quality metrics of a test image against a reference")
    met.add_argument("reference")
    met.add_argument("test")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.command == "metrics":
            print(json.dumps(cmd_metrics(args.reference, args.test)))
            return 0
        cfg = _apply_flags(load_config(args.config), args)
        if args.command == "train-codebooks":
            written = cmd_train_codebooks(cfg)
        elif args.command == "rank-channels":
            written = cmd_rank_channels(cfg)
        elif args.command == "simulate":
            written = cmd_simulate(cfg, args.snr_grid)
        elif args.command == "encode":
            written = cmd_encode(cfg, args.image, args.output, args.method, args.keep,
                                 args.stages, args.group_size)
        else:
            written = cmd_decode(cfg, args.stream, args.output)
    except Exception as e:  # one-line diagnostic, nonzero exit
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"progtx: error: {msg}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
