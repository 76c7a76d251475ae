import numpy as np
import pytest
import torch

from nextlocmoe.backbone import (
    CHECKPOINT_MAGIC,
    PROFILES,
    NextLocMoE,
    RoutingOverride,
    apply_freeze_policy,
    build_model,
    collate,
    load_checkpoint,
    model_config,
    parameter_category,
    save_checkpoint,
    state_checksum,
    trainable_parameters,
)

TRAINABLE_CATEGORIES = {
    "embedding", "history_encoder", "function_router", "function_experts", "input_proj", "prompt_prefix",
    "layernorm", "output_head", "group_prior_proj", "lora", "user_router",
}
FROZEN_CATEGORIES = {"attention", "ffn", "expert_base"}


# ---------------------------------------------------------------- configuration

def test_profiles_and_overrides():
    assert set(PROFILES) == {"desk", "paper", "tiny"}
    cfg = model_config("desk", L2=3)
    assert cfg.L2 == 3 and cfg.record_dim == 176 and cfg.seq_len == 8 + 40 + 5
    assert model_config("tiny").d_model <= 16
    with pytest.raises(ValueError):
        model_config("huge")


@pytest.mark.parametrize("bad", [dict(L2=0), dict(heads=3), dict(tau=0.0), dict(k=6), dict(prompt_len=-1)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        model_config("desk", **bad)


def test_config_dict_round_trip():
    cfg = model_config("tiny", tau=0.9)
    assert type(cfg).from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        type(cfg).from_dict({"nonsense": 1})


# ---------------------------------------------------------------- input assembly

def test_assembled_sequence_length():
    cfg = model_config("desk", d_model=32, heads=2, d_ffn=64)
    m = build_model(cfg)
    x = m.assemble_input(torch.zeros(2, 40, 176), torch.zeros(2, 5, 176))
    assert x.shape == (2, 53, 32)


def test_assembly_without_prefix(tiny_cfg):
    m = build_model(model_config("tiny", prompt_len=0))
    x = m.assemble_input(torch.zeros(1, tiny_cfg.M, tiny_cfg.record_dim), torch.zeros(1, tiny_cfg.N, tiny_cfg.record_dim))
    assert x.shape[1] == tiny_cfg.M + tiny_cfg.N


def test_zero_input_projection_leaves_prefix_and_positions(tiny_model, tiny_cfg):
    with torch.no_grad():
        tiny_model.in_proj.weight.zero_()
        tiny_model.in_proj.bias.zero_()
    x = tiny_model.assemble_input(torch.randn(1, tiny_cfg.M, tiny_cfg.record_dim), torch.randn(1, tiny_cfg.N, tiny_cfg.record_dim))
    P = tiny_cfg.prompt_len
    torch.testing.assert_close(x[0, P:], tiny_model.positions[P:x.shape[1]], rtol=0, atol=0)
    torch.testing.assert_close(x[0, :P], tiny_model.prefix.vectors + tiny_model.positions[:P], rtol=0, atol=0)


def test_assembly_rejects_wrong_width(tiny_model, tiny_cfg):
    with pytest.raises(ValueError):
        tiny_model.assemble_input(torch.zeros(1, tiny_cfg.M, 3), torch.zeros(1, tiny_cfg.N, 3))


def test_window_mismatch_rejected(tiny_model, city):
    from nextlocmoe.data import dataset_samples
    samples = dataset_samples(city, 6, 2)[:2]
    with pytest.raises(ValueError):
        tiny_model(collate(samples))


# ---------------------------------------------------------------- forward

def test_forward_shapes_and_trace(tiny_model, tiny_batch, tiny_cfg):
    pred, trace = tiny_model(tiny_batch)
    B = len(tiny_batch)
    assert pred.shape == (B, 2)
    assert trace.func_probs.shape == (B, tiny_cfg.N, tiny_cfg.K_f)
    assert (trace.func_selected.sum(-1) == tiny_cfg.k).all()
    assert len(trace.user_probs) == tiny_cfg.L2
    for p, s in zip(trace.user_probs, trace.user_selected):
        assert p.shape == (B, 1, tiny_cfg.K_p) and (s.sum(-1) >= 1).all()
    assert trace.per_sample_entropies().shape == (B, tiny_cfg.L2)
    samples = trace.samples()
    assert len(samples) == B and len(samples[0].function) == tiny_cfg.N and len(samples[0].user) == tiny_cfg.L2


def test_forward_is_deterministic(tiny_model, tiny_batch):
    tiny_model.eval()
    a, ta = tiny_model(tiny_batch)
    b, tb = tiny_model(tiny_batch)
    assert torch.equal(a, b)
    assert all(torch.equal(x, y) for x, y in zip(ta.user_probs, tb.user_probs))


def test_same_seed_same_model(tiny_cfg):
    assert state_checksum(build_model(tiny_cfg, 5)) == state_checksum(build_model(tiny_cfg, 5))
    assert state_checksum(build_model(tiny_cfg, 5)) != state_checksum(build_model(tiny_cfg, 6))


def test_model_never_reads_target_id(tiny_model, tiny_batch):
    other = tiny_batch.index(slice(None))
    other.target_id = torch.full_like(other.target_id, -1)
    assert torch.equal(tiny_model.predict_batch(tiny_batch)[0], tiny_model.predict_batch(other)[0])


def test_prediction_does_not_depend_on_user_id(tiny_model, tiny_samples):
    from dataclasses import replace
    s = tiny_samples[0]
    a, _ = tiny_model.predict(s)
    b, _ = tiny_model.predict(replace(s, user_id="someone-else"))
    assert a == b


def test_override_replays_routing(tiny_model, tiny_batch):
    _, trace = tiny_model(tiny_batch)
    forced = [torch.zeros_like(s) for s in trace.user_selected]
    for f in forced:
        f[..., 3] = True
    _, t2 = tiny_model(tiny_batch, RoutingOverride(trace.func_selected, forced))
    assert all(torch.equal(a, b) for a, b in zip(t2.user_selected, forced))


def test_sparse_calls_match_selection(tiny_model, tiny_batch):
    for layer in tiny_model.moe_layers:
        layer.moe.expert_calls = 0
    _, trace = tiny_model(tiny_batch)
    assert tiny_model.expert_calls() == sum(int(s.sum()) for s in trace.user_selected)


def test_experts_equal_replaced_ffn_at_init(tiny_model):
    x = torch.randn(3, 4, tiny_model.config.d_model)
    for layer in tiny_model.moe_layers:
        for expert in layer.moe.experts:
            torch.testing.assert_close(expert(x, layer.moe.base_ffn), layer.moe.base_ffn(x), rtol=0, atol=1e-6)


# ---------------------------------------------------------------- ablations

def test_ablations_change_predictions(tiny_model, tiny_batch):
    with torch.no_grad():
        for layer in tiny_model.moe_layers:
            for e in layer.moe.experts:
                e.b1.normal_()
                e.b2.normal_()
    full, _ = tiny_model.predict_batch(tiny_batch)
    tiny_model.ablate = {"persona-moe"}
    no_persona, trace = tiny_model.predict_batch(tiny_batch)
    assert trace.user_probs == [] and not torch.allclose(full, no_persona)
    tiny_model.ablate = {"loc-moe"}
    no_loc, trace = tiny_model.predict_batch(tiny_batch)
    assert trace.func_probs is None and not torch.allclose(full, no_loc)


def test_persona_ablation_uses_base_ffn(tiny_model, tiny_batch):
    tiny_model.ablate = {"persona-moe"}
    a, _ = tiny_model.predict_batch(tiny_batch)
    with torch.no_grad():
        for layer in tiny_model.moe_layers:
            for e in layer.moe.experts:
                e.b1.normal_()
    b, _ = tiny_model.predict_batch(tiny_batch)
    assert torch.equal(a, b)


# ---------------------------------------------------------------- freeze policy

def test_manifest_partitions_all_parameters(tiny_model):
    manifest = apply_freeze_policy(tiny_model)
    assert set(manifest) == {n for n, _ in tiny_model.named_parameters()}
    assert {c for s, c in manifest.values() if s == "trainable"} == TRAINABLE_CATEGORIES
    assert {c for s, c in manifest.values() if s == "frozen"} == FROZEN_CATEGORIES
    for name, p in tiny_model.named_parameters():
        assert p.requires_grad == (manifest[name][0] == "trainable")
    assert {n for n, _ in trainable_parameters(tiny_model)} == {n for n, v in manifest.items() if v[0] == "trainable"}


def test_paper_profile_policy_on_meta_device():
    with torch.device("meta"):
        model = NextLocMoE(model_config("paper"))
    manifest = apply_freeze_policy(model)
    for name, (status, cat) in manifest.items():
        if ".attn." in name:
            assert status == "frozen"
        if ".ln1." in name or ".ln2." in name:
            assert status == "trainable"
    assert len(model.std_layers) == 8 and len(model.moe_layers) == 4
    assert model.moe_layers[0].moe.base_ffn.fc1.weight.shape == (8192, 3072)


def test_unknown_parameter_rejected():
    with pytest.raises(KeyError):
        parameter_category("mystery.weight")


def test_one_step_changes_only_trainable(tiny_model, tiny_batch):
    frozen = {n: p.detach().clone() for n, p in tiny_model.named_parameters() if not p.requires_grad}
    trainable = {n: p.detach().clone() for n, p in tiny_model.named_parameters() if p.requires_grad}
    opt = torch.optim.Adam([p for p in tiny_model.parameters() if p.requires_grad], lr=1e-2)
    pred, trace = tiny_model(tiny_batch)
    ((pred - tiny_batch.target_xy).norm(dim=-1).mean() + trace.entropy()).backward()
    opt.step()
    params = dict(tiny_model.named_parameters())
    for n, v in frozen.items():
        assert torch.equal(params[n], v), n
    lora_changed = [n for n in trainable if ".experts." in n and ".moe." in n and not torch.equal(params[n], trainable[n])]
    assert lora_changed


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, tiny_model, tiny_batch):
    with torch.no_grad():
        tiny_model.head[2].bias.add_(0.25)
    path = save_checkpoint(tmp_path / "m.ckpt", tiny_model, {"note": "x"})
    loaded, payload = load_checkpoint(path)
    assert payload["extra"] == {"note": "x"} and payload["magic"] == CHECKPOINT_MAGIC
    assert state_checksum(loaded) == state_checksum(tiny_model)
    assert torch.equal(loaded.predict_batch(tiny_batch)[0], tiny_model.predict_batch(tiny_batch)[0])
    assert load_checkpoint(tmp_path / "m")[0].config == tiny_model.config


def test_checkpoint_keeps_precision(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg).double()
    loaded, _ = load_checkpoint(save_checkpoint(tmp_path / "d.ckpt", model))
    assert loaded.dtype == torch.float64


def test_checkpoint_bad_magic_and_version(tmp_path, tiny_model):
    path = save_checkpoint(tmp_path / "m.ckpt", tiny_model)
    payload = torch.load(path, weights_only=True)
    torch.save({**payload, "magic": "nope"}, tmp_path / "bad.ckpt")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    torch.save({**payload, "schema_version": 99}, tmp_path / "old.ckpt")
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(tmp_path / "old.ckpt")


def test_load_pretrained_backbone(tiny_cfg, tiny_batch):
    donor = build_model(tiny_cfg, seed=9)
    states = [layer.state_dict() for layer in donor.std_layers]
    for layer in donor.moe_layers:
        s = {k: v for k, v in layer.state_dict().items() if k.split(".")[0] in ("ln1", "attn", "ln2")}
        s.update({"ffn." + k[len("moe.base_ffn."):]: v for k, v in layer.state_dict().items() if k.startswith("moe.base_ffn.")})
        states.append(s)
    model = build_model(tiny_cfg, seed=0)
    model.load_pretrained_backbone(states)
    assert torch.equal(model.moe_layers[0].moe.base_ffn.fc1.weight, donor.moe_layers[0].moe.base_ffn.fc1.weight)
    assert torch.equal(model.std_layers[0].attn.in_proj_weight, donor.std_layers[0].attn.in_proj_weight)
    with pytest.raises(ValueError):
        model.load_pretrained_backbone(states[:1])
    with pytest.raises(KeyError):
        model.load_pretrained_backbone(states[:-1] + [{**states[-1], "extra.weight": torch.zeros(1)}])
