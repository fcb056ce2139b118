import sysconfig
from pathlib import Path

import pytest

CORPUS_BYTES = 1_200_000


def stdlib_text(n_bytes):
    root = Path(sysconfig.get_paths()["stdlib"])
    out = bytearray()
    for p in sorted(root.glob("*.py")):
        out += p.read_bytes()
        if len(out) >= n_bytes:
            break
    return bytes(out[:n_bytes])


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    """A 1.2 MB plain-text corpus assembled from the Python standard library."""
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_bytes(stdlib_text(CORPUS_BYTES))
    return path


@pytest.fixture(scope="session")
def small_corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("small") / "small.txt"
    path.write_bytes(stdlib_text(60_000))
    return path
