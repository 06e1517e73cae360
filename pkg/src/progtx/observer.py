"""Channel importance by masking one channel at a time.

The score of a channel is the mean, over a calibration corpus, of how much
the reconstruction MSE grows when that channel alone is zeroed. No
quantization is applied, so the score isolates the channel's energy.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .codec_masking import (ChannelizedLatent, ImportanceRanking, analyze, mask_channels,
                            pad_to_block, synthesize)
from .imageio import ImageBuffer
from .metrics import mse, psnr


def _latent(image: ImageBuffer, block_size: int) -> ChannelizedLatent:
    lat = analyze(pad_to_block(image, block_size), block_size)
    return ChannelizedLatent(lat.channels, block_size, image.width, image.height)


def channel_degradation(image: ImageBuffer, block_size: int = 8) -> np.ndarray:
    """Per-channel MSE increase for one image when that channel is zeroed."""
    lat = _latent(image, block_size)
    base = mse(image, synthesize(lat))
    out = np.empty(lat.n_channels)
    for c in range(lat.n_channels):
        masked = lat.channels.copy()
        masked[c] = 0.0
        out[c] = mse(image, synthesize(lat.replace(masked))) - base
    return out


def rank_channels(corpus: Sequence[ImageBuffer], block_size: int = 8) -> ImportanceRanking:
    if len(corpus) == 0:
        raise ValueError("rank_channels needs a non-empty corpus")
    total = np.zeros(3 * block_size * block_size)
    for image in corpus:
        total += channel_degradation(image, block_size)
    scores = total / len(corpus)
    # stable sort on -score keeps the lower channel index first among ties
    order = np.argsort(-scores, kind="stable")
    return ImportanceRanking(tuple(order.tolist()), tuple(scores.tolist()))


def masking_curve(ranking: ImportanceRanking, image: ImageBuffer, keep_grid: Sequence[int],
                  block_size: int = 8, order: Sequence[int] | None = None
                  ) -> list[tuple[int, float]]:
    """PSNR of the image rebuilt from its top-``keep`` channels, for each grid point.

    ``order`` replaces the ranking's order, e.g. with a random permutation for
    the unsorted baseline.
    """
    if list(keep_grid) != sorted(keep_grid):
        raise ValueError("keep_grid must be sorted ascending")
    if order is not None:
        ranking = ImportanceRanking(tuple(order), ranking.scores)
    lat = _latent(image, block_size)
    return [(int(k), psnr(image, synthesize(mask_channels(lat, ranking, int(k)))))
            for k in keep_grid]
