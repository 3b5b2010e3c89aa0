import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from skelfont import data


@pytest.fixture(scope="session")
def corpus20(tmp_path_factory) -> Path:
    """20-glyph desk corpus shared across tests."""
    root = tmp_path_factory.mktemp("corpus20")
    spec = data.SynthSpec(glyph_count=20, canvas=64, seed=11)
    data.synth_corpus(spec, root)
    return root


@pytest.fixture(scope="session")
def corpus20_entries(corpus20):
    return data.load_manifest(corpus20 / "manifest.json")
