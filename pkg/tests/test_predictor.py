import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from servicetime.config import ModelConfig
from servicetime.ingest import Dataset
from servicetime.predictor import (
    MLPHead, ServiceTimeModel, ServiceTimeNet, UnknownTypeError, assemble_embedding, day_batches, train,
)

from conftest import make_request
from oracles import central_difference_check


def test_embedding_width():
    net = ServiceTimeNet(6, 4, ModelConfig())
    assert net.embedding_dim == 227
    e = assemble_embedding(torch.randn(6, 32), torch.randn(32), torch.randn(3))
    assert e.shape == (227,)


def test_variants_zero_fill_same_width():
    e_inter, row, intra = torch.randn(2, 3, 4), torch.randn(2, 4), torch.ones(2, 3)
    full = assemble_embedding(e_inter, row, intra)
    v = assemble_embedding(e_inter, row, intra, "-v")
    ct = assemble_embedding(e_inter, row, intra, "-ct")
    assert full.shape == v.shape == ct.shape
    assert (v[:, -3:] == 0).all() and torch.equal(v[:, :-3], full[:, :-3])
    assert (ct[:, :12] == 0).all() and torch.equal(ct[:, 12:], full[:, 12:])


def test_same_day_requests_share_encoder_slots():
    e_inter, rows = torch.randn(3, 4), torch.randn(5, 4)
    a = assemble_embedding(e_inter, rows[2], torch.tensor([1.0, 2.0, 3.0]))
    b = assemble_embedding(e_inter, rows[2], torch.tensor([4.0, 5.0, 6.0]))
    assert torch.equal(a[:-3], b[:-3]) and not torch.equal(a[-3:], b[-3:])


def test_zero_head_is_ln2():
    head = MLPHead(5, [8])
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    torch.testing.assert_close(head(torch.randn(4, 5)), torch.full((4,), math.log(2.0)))


def test_identity_single_layer():
    head = MLPHead(1, [], "identity")
    with torch.no_grad():
        head.final.weight.fill_(1.0)
        head.final.bias.zero_()
    assert head(torch.tensor([[3.0]])).item() == 3.0


def test_head_gradient_check():
    torch.manual_seed(0)
    head = MLPHead(5, [8]).double()
    x = torch.randn(6, 5, dtype=torch.float64)
    y = torch.rand(6, dtype=torch.float64)
    assert central_difference_check(lambda: ((head(x) - y) ** 2).mean(), list(head.parameters())) < 1e-3


def test_nonfinite_activation_names_layer():
    head = MLPHead(2, [4, 4])
    with torch.no_grad():
        head.hidden[1].bias.fill_(float("inf"))
    with pytest.raises(FloatingPointError, match="layer 2"):
        head(torch.randn(1, 2))


def test_day_batches_cover_whole_days():
    anchors = np.repeat(np.arange(10), 7)
    idx = np.arange(70)
    batches = list(day_batches(anchors, idx, 20, np.random.default_rng(0)))
    assert sorted(np.concatenate(batches)) == list(range(70))
    for b in batches:
        for day in np.unique(anchors[b]):
            assert (anchors[b] == day).sum() == 7


def test_predictions_nonnegative_and_deterministic(tiny_model, tiny_experiment):
    reqs = tiny_experiment.test_requests[:50]
    a = tiny_model.predict_requests(reqs, tiny_experiment.panel)
    b = tiny_model.predict_requests(reqs, tiny_experiment.panel)
    assert a == b
    assert all(p.service_time_days >= 0 for p in a)
    assert not any(p.fallback for p in a)


def test_unknown_type(tiny_model, tiny_experiment):
    req = replace(tiny_experiment.test_requests[0], request_type="Pony Rides")
    with pytest.raises(UnknownTypeError, match="Bulk Trash"):
        tiny_model.predict(req, tiny_experiment.panel)


def test_history_starved_fallback(tiny_model, tiny_experiment):
    req = tiny_experiment.train.requests[0]
    p = tiny_model.predict(req, tiny_experiment.panel)
    assert p.fallback and p.service_time_days == p.gpr_mean


def test_checkpoint_round_trip(tiny_model, tiny_experiment, tmp_path):
    path = tmp_path / "ck.zip"
    tiny_model.save(path)
    loaded = ServiceTimeModel.load(path)
    reqs = tiny_experiment.test_requests[:30]
    a = tiny_model.predict_requests(reqs, tiny_experiment.panel)
    b = loaded.predict_requests(reqs, tiny_experiment.panel)
    assert a == b
    man = loaded.manifest()
    assert man["seed"] == 0 and man["region_count"] == 5 and len(man["type_vocabulary"]) == 4
    assert man["panel_stats"] and man["region_order"] == [0, 1, 2, 3, 4]


def test_constant_target_fits(tiny_config):
    reqs = [make_request(k, 3.0, type_=t, region=g, hour=h, rid=f"{k}{t}{g}{h}")
            for k in range(40) for t in "AB" for g in range(2) for h in (8, 13)]
    ds = Dataset(reqs, ["A", "B"], region_count=2)
    cfg = replace(tiny_config, train=replace(tiny_config.train, epochs=50, patience=50))
    model = train(ds, cfg)
    from servicetime.panel import build_panel

    panel = build_panel(ds, 2)
    preds = np.array([p.service_time_days for p in model.predict_requests(reqs, panel)])
    assert np.mean((preds - 3.0) ** 2) < 1e-3 * 3.0**2


def test_ct_variant_has_zero_inter_type(tiny_config, tiny_experiment):
    net = ServiceTimeNet(4, 5, replace(tiny_config.model, variant="-ct"))
    w = torch.randn(2, 4, 5, 7, 2)
    e_inter, rows, attn = net.encode_days(w)
    assert (e_inter == 0).all() and attn is None
    h, _, _ = net.intra_type(w, spatial=False)
    torch.testing.assert_close(rows, h)
