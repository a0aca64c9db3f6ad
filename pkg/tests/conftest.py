import numpy as np
import pytest
import torch

from tdlm.data import synthetic_text
from tdlm.schedule import NoiseSchedule
from tdlm.tree import TokenTree, build_tree, complete_tree

torch.set_num_threads(2)

# six 1-D embeddings in two well-separated groups; the worked example used
# throughout: root splits 3|3, the 3-sets split 2|1, padding brings H to 3
SIX_EMB = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])

# fixed prose fixture for the embedding golden test (about 1 KB)
EMB_FIXTURE_TEXT = (
    "The small engine hums along the river road while the morning light "
    "climbs over the quiet town. A dog barks twice near the bakery door and "
    "the baker waves his dusty hand. Children count bright stones by the "
    "water and trade them for paper boats. The ferry waits, patient as a "
    "clock, while gulls argue about nothing in particular. By noon the "
    "market fills with voices, apples, wool, and the sharp smell of tar "
    "from the pier. An old teacher buys two pears and tells anyone who "
    "listens that rivers remember every boat. In the afternoon the wind "
    "turns, carrying rain from the hills, and shopkeepers roll their "
    "awnings down with a practiced tug. The librarian stamps each book "
    "twice because the first stamp never satisfies her. Evening settles in "
    "layers: first the long shadows, then the lamps, then the soft clatter "
    "of dishes behind shuttered windows. Somewhere a violin practices the "
    "same eight bars until they finally agree to be music. The river keeps "
    "moving, patient and dark, carrying the day west."
).encode("ascii")


@pytest.fixture(scope="session")
def six_tree() -> TokenTree:
    return build_tree(SIX_EMB, K=2, ratio_min=0.8, ratio_max=1.2, seed=0)


@pytest.fixture(scope="session")
def six_sched(six_tree) -> NoiseSchedule:
    return NoiseSchedule(H=six_tree.tree_height)


@pytest.fixture(scope="session")
def binary_tree() -> TokenTree:
    return complete_tree(2, 4)


@pytest.fixture(scope="session")
def binary_sched(binary_tree) -> NoiseSchedule:
    return NoiseSchedule(H=binary_tree.tree_height)


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory):
    """Session corpus, 1.2 MB of deterministic synthetic text."""
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_bytes(synthetic_text(1_200_000, seed=0))
    return str(path)
