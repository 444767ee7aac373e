import pytest

from prunecd.eval_harness import McItem
from prunecd.fixture import make_tiny_model, write_tiny_model
from prunecd.layer_search import option_log_likelihoods
from prunecd.tokenizer import ByteTokenizer


@pytest.fixture(scope="session")
def tiny_model():
    return make_tiny_model()


@pytest.fixture(scope="session")
def byte_tok():
    return ByteTokenizer()


@pytest.fixture(scope="session")
def tiny_model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "tiny.pcdw"
    write_tiny_model(path)
    return path


def build_mc_items(model, tokenizer, n_items=20, n_options=4):
    """Deterministic MC set whose best options are the tiny model's own picks.

    By construction MC1 over the full stack is 1.0, so every single-layer
    ablation delta is >= 0 and the search fixtures are well-posed.
    """
    letters = "abcdefghijklmnopqrstuvwxyz"
    items = []
    qi = 0
    while len(items) < n_items and qi < 200:
        question = f"fact {qi}:"
        options = tuple(letters[(qi + 3 * j) % 26] for j in range(n_options))
        probe = McItem(question=question, options=options, best=0)
        scores = option_log_likelihoods(model, tokenizer, probe, model.full_layers())
        ranked = sorted(range(n_options), key=lambda i: -scores[i])
        if scores[ranked[0]] - scores[ranked[1]] < 1e-9:
            qi += 1
            continue
        items.append(
            McItem(
                question=question,
                options=options,
                best=ranked[0],
                correct_set=frozenset([ranked[0]]),
            )
        )
        qi += 1
    assert len(items) == n_items, "could not assemble the MC fixture"
    return items


@pytest.fixture(scope="session")
def mc_items(tiny_model, byte_tok):
    return build_mc_items(tiny_model, byte_tok)
