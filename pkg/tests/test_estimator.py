import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ketrag import KetRAG
from ketrag.exceptions import ConfigError

from synth import planted_corpus


@pytest.fixture(scope="module")
def fitted():
    docs, qa = planted_corpus(n_docs=4, filler_per_doc=20, seed=4)
    model = KetRAG(chunk_size=150, tau=1, context_limit=400).fit(docs)
    return model, qa


def test_params_round_trip():
    model = KetRAG(beta=0.3, theta=0.7)
    params = model.get_params()
    assert params["beta"] == 0.3 and params["theta"] == 0.7 and params["k_seed"] == 10
    twin = clone(model)
    assert twin.get_params() == params and not hasattr(twin, "index_")
    assert model.set_params(beta=0.5).beta == 0.5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        KetRAG().transform(["q?"])


def test_fit_transform_predict(fitted):
    model, qa = fitted
    assert model.n_documents_ == 4
    questions = [r["question"] for r in qa]
    contexts = model.transform(questions)
    assert len(contexts) == len(qa) and all(c.total_tokens <= 400 for c in contexts)
    texts = model.predict(questions)
    assert texts.dtype == object and list(texts) == [c.text for c in contexts]
    score = model.score(questions, [r["answers"] for r in qa])
    assert 0.0 <= score <= 1.0


def test_input_validation(fitted):
    model, _ = fitted
    with pytest.raises(ValueError):
        KetRAG().fit([])
    with pytest.raises(ValueError):
        KetRAG().fit([("a", "x"), ("a", "y")])
    with pytest.raises(ConfigError):
        KetRAG(theta=2.0).fit(["some text here."])
    with pytest.raises(ValueError):
        model.score(["q?"], [["a"], ["b"]])


def test_plain_strings_get_ids():
    model = KetRAG(chunk_size=150, tau=0).fit(["Alpha Beta met Gamma.", "Gamma lives in Delta."])
    assert [s.parent for s in model.index_.sub_chunks] == [0, 1]
    assert np.isnan(model.score([], []))
