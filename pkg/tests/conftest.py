import numpy as np
import pytest

from cbseq.core import FiveTuple, FlowRecord
from cbseq.synthgen import reference_corpus


def make_flow(src="10.0.0.1", sport=5000, dst="10.0.0.2", dport=443, proto="TCP", start=0.0,
              end=None, cp=3, sp=2, cb=100, sb=50, label=None, family=None):
    end = start + 1.0 if end is None else end
    return FlowRecord(FiveTuple(src, sport, dst, dport, proto), start, end, cp, sp, cb, sb,
                      label, family)


@pytest.fixture
def flow_factory():
    return make_flow


@pytest.fixture(scope="session")
def ref_day():
    """One-day reference corpus: flows and generator metadata."""
    return reference_corpus(seed=0, days=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
