import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mamo.kg import generate_synthetic_kg  # noqa: E402
from mamo.oracle import build_fewshot_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_split():
    return generate_synthetic_kg(60, 4, 80, 0.25, seed=3)


@pytest.fixture(scope="session")
def efo1_dataset(small_split):
    return build_fewshot_dataset(small_split, "efo1", 200, ratio=0.05, seed=0, eval_per_type=4)


@pytest.fixture(scope="session")
def multihop_dataset(small_split):
    return build_fewshot_dataset(small_split, "multihop", 200, ratio=0.05, seed=0, eval_per_type=6)
