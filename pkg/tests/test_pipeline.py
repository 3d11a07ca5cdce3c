import numpy as np
import pytest
import torch

from drgw.graph import Graph
from drgw.metrics import flipped_edges_pct
from drgw.models import build_models
from drgw.pipeline import decoder_plan, latent_noise_attack, modified_carrier, watermark_embed, graph_tensors
from drgw.encoder import encode
from drgw.verification import WatermarkKey

from conftest import TINY

KEY = WatermarkKey(11, 4, 8, alpha=0.3)


@pytest.mark.parametrize("variant", ["full", "no_inn", "no_editor", "naive_baseline"])
def test_embed_respects_budget_and_nodes(variant, small_corpus):
    models = build_models(variant, TINY, seed=1)
    for g in small_corpus[:4]:
        gw, plan = watermark_embed(g, KEY, models, k_fraction=0.1)
        k = max(1, int(0.1 * g.num_edges))
        assert len(plan) <= k
        if models.editor is not None:
            assert len(plan) == k
        assert gw.num_nodes == g.num_nodes
        assert flipped_edges_pct(g, gw) == pytest.approx(100 * len(plan) / g.num_edges)


def test_zero_budget_leaves_graph_unchanged(tiny_models, small_corpus):
    g = small_corpus[0]
    gw, plan = watermark_embed(g, WatermarkKey(1, 4, 8, alpha=0.0), tiny_models, k=0)
    assert len(plan) == 0 and gw == g


def test_embedding_is_deterministic(tiny_models, small_corpus):
    g = small_corpus[1]
    a, pa = watermark_embed(g, KEY, tiny_models, k_fraction=0.1)
    b, pb = watermark_embed(g, KEY, tiny_models, k_fraction=0.1)
    assert a == b and np.array_equal(pa.flips, pb.flips)


def test_different_keys_pick_different_plans(tiny_models, small_corpus):
    g = small_corpus[2]
    plans = {tuple(map(tuple, watermark_embed(g, WatermarkKey(s, 4, 8, alpha=0.3), tiny_models, 0.2)[1].flips))
             for s in range(5)}
    assert len(plans) > 1


def test_floor_to_zero_budget_warns(tiny_models, small_corpus):
    g = small_corpus[0]
    _, plan, record = watermark_embed(g, KEY, tiny_models, k_fraction=0.001, return_record=True)
    assert record.budget_k == 1 and len(plan) == 1
    assert record.warnings and "floors to 0" in record.warnings[0]


def test_empty_inputs_are_rejected(tiny_models):
    with pytest.raises(ValueError, match="empty"):
        watermark_embed(Graph(0), KEY, tiny_models)
    with pytest.raises(ValueError, match="without edges"):
        watermark_embed(Graph(5), KEY, tiny_models)


def test_modified_carrier_without_injection_is_identity(tiny_models, small_corpus):
    g = small_corpus[3]
    gt = graph_tensors(g, tiny_models)
    lat = encode(gt, tiny_models.encoder)
    with torch.no_grad():
        out = modified_carrier(lat, gt, KEY.tensor(), 0.0, tiny_models)
    assert torch.allclose(out, lat.hw_nodes, atol=1e-10)


def test_decoder_plan_flips_only_disagreements():
    h = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    cands = np.array([[0, 1], [0, 2], [1, 2]])
    # graph has edge (0, 1) only; decoder says 01 present, 02 and 12 absent -> agreement everywhere
    present = np.array([True, False, False])
    assert len(decoder_plan(h, h, cands, 3, present)) == 0
    h_mod = h.clone()
    h_mod[2] = torch.tensor([1.0, 0.5], dtype=torch.float64)
    plan = decoder_plan(h, h_mod, cands, 1, present)
    # 02 and 12 now decode as edges; equal logit change, ties go to the smaller pair
    assert plan.flips.tolist() == [[0, 2]]
    assert len(decoder_plan(h, h_mod, cands, 5, present)) == 2


def test_latent_noise_attack_returns_valid_graph(tiny_models, small_corpus):
    g = small_corpus[4]
    out = latent_noise_attack(g, 0.5, tiny_models, seed=3, k_fraction=0.1)
    assert out.num_nodes == g.num_nodes
    assert 0 < flipped_edges_pct(g, out) <= 100 * max(1, int(0.1 * g.num_edges)) / g.num_edges
    assert out == latent_noise_attack(g, 0.5, tiny_models, seed=3, k_fraction=0.1)
    with pytest.raises(ValueError):
        latent_noise_attack(g, -1.0, tiny_models)
