import numpy as np
import pytest
from hypothesis import settings

from partseg import nnet
from partseg.annotation import Annotation, InstanceNode
from partseg.template import parse_template

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")

FORWARD_CALLS = {"count": 0, "worst": 0.0}


@pytest.fixture(autouse=True)
def mask_softmax_invariant(monkeypatch):
    """Every forward pass in every test must yield mask rows summing to 1."""
    real = nnet.forward

    def checked(params, points, return_cache=False):
        res = real(params, points, return_cache)
        out = res[0] if return_cache else res
        if out.mask_probabilities is not None:
            err = float(np.max(np.abs(out.mask_probabilities.sum(axis=1) - 1.0), initial=0.0))
            FORWARD_CALLS["worst"] = max(FORWARD_CALLS["worst"], err)
            assert err <= 1e-6, f"mask probabilities off by {err}"
        FORWARD_CALLS["count"] += 1
        return res

    monkeypatch.setattr(nnet, "forward", checked)
    yield


TOY_DOCUMENT = {
    "category": "toy",
    "root": 0,
    "nodes": [
        {"id": 0, "label": "toy", "kind": "and", "children": [1, 2]},
        {"id": 1, "label": "top", "kind": "and", "children": [3, 4]},
        {"id": 2, "label": "bottom", "kind": "or", "children": [5, 6]},
        {"id": 3, "label": "plate", "kind": "leaf", "children": []},
        {"id": 4, "label": "bar", "kind": "leaf", "children": []},
        {"id": 5, "label": "legs", "kind": "leaf", "children": []},
        {"id": 6, "label": "pedestal", "kind": "leaf", "children": []},
    ],
    "levels": {"1": [1, 2], "2": [3, 4, 5, 6]},
}


@pytest.fixture
def toy_template():
    return parse_template(TOY_DOCUMENT)


def toy_annotation(shape_id="s0", n=8, bottom=5):
    """Points 0-1 plate, 2-3 bar (two instances), 4-7 the bottom leaf."""
    top = InstanceNode(1, [InstanceNode(3, [], [0, 1]), InstanceNode(4, [], [2]), InstanceNode(4, [], [3])])
    low = InstanceNode(2, [InstanceNode(bottom, [], list(range(4, n)))])
    return Annotation(shape_id, "toy", InstanceNode(0, [top, low]), n)


@pytest.fixture
def toy_annotation_factory():
    return toy_annotation


# criterion number -> (passed, title, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n}. {title}: {detail}")
