import numpy as np
import pytest
import torch

from nextlocmoe.data import Location, Record
from nextlocmoe.embedding import STEmbedding, embed_record, embed_trajectory
from nextlocmoe.history import TcnConfig, TemporalConvEncoder, encode_history


def rec(x=0.3, y=0.7, w=2, d=9, dur=0.25, loc_id=1):
    return Record(Location(loc_id, x, y), w, d, dur)


@pytest.fixture
def emb():
    torch.manual_seed(0)
    return STEmbedding().double()


# ---------------------------------------------------------------- record embedding

def test_default_dimension(emb):
    assert embed_record(rec(), emb).shape == (128 + 16 + 16 + 16,)


def test_zero_spatial_projection(emb):
    with torch.no_grad():
        emb.spatial.weight.zero_()
        emb.spatial.bias.zero_()
    out = embed_record(rec(x=0.9, y=0.1), emb)
    assert torch.equal(out[:128], torch.zeros(128, dtype=out.dtype))


def test_weekday_change_only_touches_day_slice(emb):
    a, b = embed_record(rec(w=1), emb), embed_record(rec(w=5), emb)
    diff = (a != b).nonzero().flatten()
    assert diff.min() >= 128 and diff.max() < 144


def test_duration_change_leaves_other_slices(emb):
    a, b = embed_record(rec(dur=0.1), emb), embed_record(rec(dur=0.9), emb)
    assert torch.equal(a[:160], b[:160]) and not torch.equal(a[160:], b[160:])


def test_rejects_unnormalized_coordinates(emb):
    with pytest.raises(ValueError, match="unnormalized"):
        embed_record(rec(x=250.0), emb)


def test_layout_matches_components(emb):
    r = rec()
    out = embed_record(r, emb)
    xy = torch.tensor([r.location.x, r.location.y], dtype=torch.float64)
    torch.testing.assert_close(out[:128], emb.spatial.weight @ xy + emb.spatial.bias, rtol=0, atol=1e-12)
    assert torch.equal(out[128:144], emb.day.weight[r.w])
    assert torch.equal(out[144:160], emb.hour.weight[r.d])
    torch.testing.assert_close(out[160:], emb.duration.weight[:, 0] * r.dur + emb.duration.bias, rtol=0, atol=1e-12)


def test_spatial_slice_is_affine(emb):
    rng = np.random.default_rng(0)
    base = embed_record(rec(x=0.0, y=0.0), emb)[:128]
    for _ in range(20):
        (x1, y1), (x2, y2) = rng.uniform(0, 1, (2, 2))
        s1 = embed_record(rec(x=x1, y=y1), emb)[:128] - base
        s2 = embed_record(rec(x=x2, y=y2), emb)[:128] - base
        s12 = embed_record(rec(x=(x1 + x2) / 2, y=(y1 + y2) / 2), emb)[:128] - base
        torch.testing.assert_close(s12, (s1 + s2) / 2, rtol=0, atol=1e-6)


def test_lookup_slices_take_few_values(emb):
    rng = np.random.default_rng(1)
    rs = [rec(w=int(rng.integers(7)), d=int(rng.integers(24)), dur=float(rng.uniform())) for _ in range(500)]
    out = embed_trajectory(rs, emb)
    assert len({tuple(r.tolist()) for r in out[:, 128:144]}) <= 7
    assert len({tuple(r.tolist()) for r in out[:, 144:160]}) <= 24


def test_init_bounds():
    e = STEmbedding()
    assert e.spatial.weight.abs().max() <= 1 / np.sqrt(2)
    assert e.day.weight.abs().max() <= 1 / np.sqrt(7)
    assert e.hour.weight.abs().max() <= 1 / np.sqrt(24)
    assert e.day.weight.shape == (7, 16) and e.hour.weight.shape == (24, 16)


# ---------------------------------------------------------------- trajectories

def test_length_one_trajectory(emb):
    r = rec()
    out = embed_trajectory([r], emb)
    assert out.shape == (1, 176) and torch.equal(out[0], embed_record(r, emb))


def test_history_matrix_shape(emb):
    assert embed_trajectory([rec(d=i % 24) for i in range(40)], emb).shape == (40, 176)


def test_permuting_records_permutes_rows(emb):
    rs = [rec(x=0.1 * i, w=i % 7, d=i) for i in range(5)]
    a = embed_trajectory(rs, emb)
    b = embed_trajectory([rs[1], rs[0], *rs[2:]], emb)
    assert torch.equal(a[[1, 0, 2, 3, 4]], b)


def test_empty_trajectory(emb):
    with pytest.raises(ValueError):
        embed_trajectory([], emb)


# ---------------------------------------------------------------- history encoder

@pytest.fixture
def tcn():
    torch.manual_seed(0)
    return TemporalConvEncoder(176, TcnConfig()).double()


def test_receptive_field_default():
    assert TcnConfig().receptive_field == 7


def test_zero_history_zero_output(tcn):
    out = encode_history(torch.zeros(40, 176, dtype=torch.float64), tcn)
    assert out.shape == (64,) and torch.equal(out, torch.zeros(64, dtype=torch.float64))


def test_rows_older_than_receptive_field_ignored(tcn):
    rng = np.random.default_rng(0)
    M = 40
    z = torch.as_tensor(rng.normal(size=(M, 176)))
    base = encode_history(z, tcn)
    R = TcnConfig().receptive_field
    for row in range(0, M - R):
        z2 = z.clone()
        z2[row] += torch.as_tensor(rng.normal(size=176)) * 10
        assert torch.equal(encode_history(z2, tcn), base), row
    z2 = z.clone()
    z2[M - R] += 1.0  # the oldest row inside the window does matter
    assert not torch.equal(encode_history(z2, tcn), base)


def test_single_row_history(tcn):
    rng = np.random.default_rng(1)
    z = torch.as_tensor(rng.normal(size=(1, 176)))
    a = encode_history(z, tcn)
    b = encode_history(z.clone(), tcn)
    assert torch.equal(a, b) and a.shape == (64,)
    assert not torch.equal(encode_history(z + 1, tcn), a)


def test_appending_a_row_changes_output(tcn):
    rng = np.random.default_rng(2)
    changed = 0
    for _ in range(100):
        z = torch.as_tensor(rng.normal(size=(12, 176)))
        new = torch.cat([z[1:], torch.as_tensor(rng.normal(size=(1, 176)))])
        changed += (encode_history(new, tcn) - encode_history(z, tcn)).abs().max().item() > 1e-6
    assert changed > 95


def test_empty_history_rejected(tcn):
    with pytest.raises(ValueError):
        encode_history(torch.zeros(0, 176, dtype=torch.float64), tcn)


def test_tcn_config_validation():
    with pytest.raises(ValueError):
        TcnConfig(layers=2, dilations=(1,))
    with pytest.raises(ValueError):
        TcnConfig(kernel=0)
