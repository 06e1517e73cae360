"""Progressive channelized codec.

An 8x8 orthonormal DCT per colour plane turns an image into ``3 * b * b``
coefficient planes ("channels"). Channels are sent in importance order, a few
per packet, and the receiver zero-fills whatever it has not seen yet.

Channel ``c`` maps to plane ``c // b**2`` and frequency ``(u, v)`` with
``u, v = divmod(c % b**2, b)``; channels 0, 64 and 128 are the DC planes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .entropy import (Bitstream, DecodeError, ScaleTable, decode_channels,
                      encode_channels)
from .imageio import ImageBuffer

MID_GRAY = 128.0
PACKET_MAGIC = 0x50
PACKET_HEADER = struct.Struct("<BIHH")


@dataclass(frozen=True)
class ChannelizedLatent:
    """``channels`` has shape (C, H/b, W/b); width/height are the unpadded image size."""

    channels: np.ndarray
    block_size: int
    width: int
    height: int

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]

    def replace(self, channels: np.ndarray) -> "ChannelizedLatent":
        return ChannelizedLatent(channels, self.block_size, self.width, self.height)


@dataclass(frozen=True)
class ImportanceRanking:
    order: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError("ranking order must be a permutation of channel indices")
        if len(self.scores) != len(order):
            raise ValueError("one score per channel required")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))

    def to_json(self) -> str:
        return json.dumps({"order": list(self.order), "scores": list(self.scores)})

    @classmethod
    def from_json(cls, text: str) -> "ImportanceRanking":
        obj = json.loads(text)
        return cls(tuple(obj["order"]), tuple(obj["scores"]))

    @classmethod
    def identity(cls, n_channels: int) -> "ImportanceRanking":
        return cls(tuple(range(n_channels)), (0.0,) * n_channels)


@dataclass(frozen=True)
class MaskedPacket:
    image_id: int
    packet_index: int
    channel_ids: tuple[int, ...]
    stream: Bitstream

    @property
    def header_bits(self) -> int:
        return 8 * (PACKET_HEADER.size + 2 * len(self.channel_ids)) + 8 * 6

    @property
    def n_bits(self) -> int:
        return 8 * (PACKET_HEADER.size + 2 * len(self.channel_ids)) + self.stream.n_bits

    def to_bytes(self) -> bytes:
        head = PACKET_HEADER.pack(PACKET_MAGIC, self.image_id, self.packet_index,
                                  len(self.channel_ids))
        ids = struct.pack(f"<{len(self.channel_ids)}H", *self.channel_ids)
        return head + ids + self.stream.to_bytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MaskedPacket":
        if len(raw) < PACKET_HEADER.size:
            raise DecodeError("packet shorter than its header")
        magic, image_id, index, count = PACKET_HEADER.unpack_from(raw)
        if magic != PACKET_MAGIC:
            raise DecodeError(f"bad packet magic 0x{magic:02x}")
        end = PACKET_HEADER.size + 2 * count
        if len(raw) < end:
            raise DecodeError("packet truncated inside channel id list")
        ids = struct.unpack_from(f"<{count}H", raw, PACKET_HEADER.size)
        return cls(image_id, index, tuple(ids), Bitstream.from_bytes(raw[end:]))


# -- transform ---------------------------------------------------------------

def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


def pad_to_block(image: ImageBuffer, b: int) -> ImageBuffer:
    """Edge-replicate right/bottom so both dimensions are multiples of ``b``."""
    h, w = image.height, image.width
    ph, pw = -h % b, -w % b
    if ph == 0 and pw == 0:
        return image
    return ImageBuffer(np.pad(image.pixels, ((0, ph), (0, pw), (0, 0)), mode="edge"))


def analyze(image: ImageBuffer, b: int = 8) -> ChannelizedLatent:
    h, w = image.height, image.width
    if h % b or w % b:
        raise ValueError(f"image {w}x{h} is not divisible by block size {b}; pad first")
    d = dct_matrix(b)
    x = image.pixels.astype(np.float64) - MID_GRAY
    blocks = x.reshape(h // b, b, w // b, b, 3)
    # coef[p, u, v, by, bx] = sum_ij D[u,i] x[by,i,bx,j,p] D[v,j]
    coef = np.einsum("ui,yixjp,vj->puvyx", d, blocks, d, optimize=True)
    return ChannelizedLatent(coef.reshape(3 * b * b, h // b, w // b), b, w, h)


def synthesize_float(latent: ChannelizedLatent) -> np.ndarray:
    """Inverse transform without clamping or rounding, shape (H, W, 3), padded size."""
    b = latent.block_size
    gh, gw = latent.grid
    d = dct_matrix(b)
    coef = latent.channels.reshape(3, b, b, gh, gw)
    x = np.einsum("ui,puvyx,vj->yixjp", d, coef, d, optimize=True)
    return x.reshape(gh * b, gw * b, 3) + MID_GRAY


def synthesize(latent: ChannelizedLatent) -> ImageBuffer:
    x = synthesize_float(latent)[: latent.height, : latent.width]
    return ImageBuffer(np.clip(np.rint(x), 0, 255).astype(np.uint8))


def mask_channels(latent: ChannelizedLatent, ranking: ImportanceRanking,
                  keep: int) -> ChannelizedLatent:
    c = latent.n_channels
    if not 0 <= keep <= c:
        raise ValueError(f"keep must lie in [0, {c}], got {keep}")
    out = np.zeros_like(latent.channels)
    kept = list(ranking.order[:keep])
    out[kept] = latent.channels[kept]
    return latent.replace(out)


def quantize(latent: ChannelizedLatent, table: ScaleTable) -> np.ndarray:
    """Integer symbols, round half to even."""
    steps = table.steps[:, None, None]
    return np.rint(latent.channels / steps).astype(np.int64)


def dequantize(symbols: np.ndarray, table: ScaleTable, like: ChannelizedLatent) -> ChannelizedLatent:
    return like.replace(symbols.astype(np.float64) * table.steps[:, None, None])


# -- packets -----------------------------------------------------------------

def encode_packets(latent: ChannelizedLatent, ranking: ImportanceRanking, group_size: int,
                   table: ScaleTable, image_id: int = 0, n_channels: int | None = None
                   ) -> list[MaskedPacket]:
    """Cut the top ``n_channels`` ranked channels into packets of ``group_size``."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    n = latent.n_channels if n_channels is None else n_channels
    symbols = quantize(latent, table)
    order = ranking.order[:n]
    packets = []
    for p, start in enumerate(range(0, n, group_size)):
        ids = tuple(order[start:start + group_size])
        stream = encode_channels([symbols[c] for c in ids], ids, table)
        packets.append(MaskedPacket(image_id, p, ids, stream))
    return packets


class ReceiverState:
    """Accumulates decoded symbol planes for one image."""

    def __init__(self, image_id: int, width: int, height: int, table: ScaleTable,
                 block_size: int = 8):
        self.image_id = image_id
        self.width = width
        self.height = height
        self.block_size = block_size
        self.table = table
        self.grid = (-(-height // block_size), -(-width // block_size))
        self.received: dict[int, np.ndarray] = {}
        self.packets_seen: set[int] = set()

    def update(self, packet: MaskedPacket) -> "ReceiverState":
        if packet.image_id != self.image_id:
            raise ValueError(
                f"packet for image {packet.image_id} given to receiver of image {self.image_id}")
        if packet.packet_index in self.packets_seen:
            return self
        per = self.grid[0] * self.grid[1]
        planes = decode_channels(packet.stream, packet.channel_ids, per, self.table)
        for c, plane in zip(packet.channel_ids, planes):
            self.received[c] = plane.reshape(self.grid)
        self.packets_seen.add(packet.packet_index)
        return self

    def latent(self) -> ChannelizedLatent:
        b = self.block_size
        symbols = np.zeros((len(self.table), *self.grid), dtype=np.int64)
        for c, plane in self.received.items():
            symbols[c] = plane
        like = ChannelizedLatent(np.zeros(symbols.shape), b, self.width, self.height)
        return dequantize(symbols, self.table, like)


def receiver_update(state: ReceiverState, packet: MaskedPacket) -> ReceiverState:
    return state.update(packet)


def decode_current(state: ReceiverState) -> ImageBuffer:
    return synthesize(state.latent())


@dataclass(frozen=True)
class MaskingCodec:
    """Bundles the shared, immutable parts of the codec."""

    table: ScaleTable
    ranking: ImportanceRanking
    block_size: int = 8

    def latent(self, image: ImageBuffer) -> ChannelizedLatent:
        lat = analyze(pad_to_block(image, self.block_size), self.block_size)
        return ChannelizedLatent(lat.channels, self.block_size, image.width, image.height)

    def encode(self, image: ImageBuffer, group_size: int, n_channels: int | None = None,
               image_id: int = 0) -> list[MaskedPacket]:
        return encode_packets(self.latent(image), self.ranking, group_size, self.table,
                              image_id=image_id, n_channels=n_channels)

    def receiver(self, image: ImageBuffer | None = None, image_id: int = 0,
                 width: int | None = None, height: int | None = None) -> ReceiverState:
        if image is not None:
            width, height = image.width, image.height
        return ReceiverState(image_id, width, height, self.table, self.block_size)

    def decode(self, packets: Sequence[MaskedPacket], width: int, height: int) -> ImageBuffer:
        state = self.receiver(image_id=packets[0].image_id if packets else 0,
                              width=width, height=height)
        for pkt in packets:
            state.update(pkt)
        return decode_current(state)
