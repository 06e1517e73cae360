"""Shared fixtures: a local corpus and a freshly trained artifact set."""

import os
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))


@pytest.fixture(scope="session")
def data_root(tmp_path_factory) -> Path:
    """Corpus root: $PROGTX_DATA, the repo's data/ dir, or a fresh build."""
    for cand in (os.environ.get("PROGTX_DATA"), ROOT / "data"):
        if cand and (Path(cand) / "desk" / "manifest.json").exists() \
                and (Path(cand) / "kodak" / "manifest.json").exists():
            return Path(cand)
    make_corpus = pytest.importorskip("make_corpus")
    out = tmp_path_factory.mktemp("data")
    make_corpus.build(out)
    return out


@pytest.fixture(scope="session")
def desk_manifest(data_root) -> Path:
    return data_root / "desk" / "manifest.json"


@pytest.fixture(scope="session")
def kodak_manifest(data_root) -> Path:
    return data_root / "kodak" / "manifest.json"


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory, desk_manifest) -> Path:
    from progtx import cli

    out = tmp_path_factory.mktemp("artifacts")
    cfg = cli.load_config(None)
    cfg.update(manifest=str(desk_manifest), artifacts=str(out))
    cli.cmd_rank_channels(cfg)
    cli.cmd_train_codebooks(cfg)
    return out


@pytest.fixture(scope="session")
def kodak_artifacts(tmp_path_factory, kodak_manifest) -> Path:
    """Ranking and scale tables fitted on the Kodak-geometry calibration split."""
    from progtx import cli

    out = tmp_path_factory.mktemp("kodak_artifacts")
    cfg = cli.load_config(None)
    cfg.update(manifest=str(kodak_manifest), artifacts=str(out))
    cli.cmd_rank_channels(cfg)
    return out
