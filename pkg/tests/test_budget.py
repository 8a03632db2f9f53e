import csv
import io

import pytest

from lws_forge.budget import (
    CSV_COLUMNS,
    ModelConfig,
    Skeleton,
    count_params,
    emit_spec_table,
    equalize_budget,
    rows_to_csv,
    with_tied,
)
from lws_forge.config import load_preset, reported_counts, skeleton_of, variants_of
from lws_forge.errors import InfeasibleBudgetError, InvalidArgumentError
from lws_forge.model import init_model, n_params
from lws_forge.profiles import ScalingSpec, build_layer_profiles

REF = load_preset("reference")
SK = skeleton_of(REF)
VARIANTS = dict(variants_of(REF))


def closed_form_total(spec, d=768, V=50279, hd=64, G=4, align=256, tied=False):
    # written out layer by layer, independent of ParamBreakdown
    total = V * d + (0 if tied else d * V) + d
    for p in build_layer_profiles(spec, d, hd, G, align):
        hq = p.n_heads * hd
        kv = G * hd
        total += d * hq + 2 * d * kv + hq * d  # q, k, v, o
        total += hq + kv  # qk-norm
        total += 3 * d * p.ffn_dim
        total += 2 * d
    return total


def test_baseline_12l_closed_form():
    spec = VARIANTS["Baseline 12L"]
    bd = count_params(SK.resolve(spec))
    # 12 layers of 12 heads x 64, FFN 3072, untied head
    per_layer = 4 * 768 * 768 - 2 * 768 * 512 + 768 + 256 + 3 * 768 * 3072 + 2 * 768
    assert bd.total == 2 * 50279 * 768 + 768 + 12 * per_layer
    assert bd.non_embedding == bd.total - 50279 * 768


@pytest.mark.parametrize("name", list(VARIANTS))
def test_count_matches_closed_form(name):
    assert count_params(SK.resolve(VARIANTS[name])).total == closed_form_total(VARIANTS[name])


@pytest.mark.parametrize("name", list(VARIANTS))
def test_reference_counts_within_two_percent(name):
    rep = reported_counts(REF)[name]
    bd = count_params(SK.resolve(VARIANTS[name]))
    assert abs(bd.total / 1e6 / rep["params_m"] - 1) < 0.02
    assert abs(bd.non_embedding / 1e6 / rep["non_embed_m"] - 1) < 0.02


def test_count_matches_materialized_model():
    sk = Skeleton(d_model=64, vocab_size=256, max_seq_len=64, head_dim=16, n_kv_heads=2)
    for spec in [
        ScalingSpec("uniform", (4.0,), (1.0,), 4),
        ScalingSpec("crown", (0.5, 3.8, 0.5), (0.5, 1.0, 0.5), 8),
        ScalingSpec("reverse", (4.0, 0.5), (1.0, 0.5), 6),
    ]:
        for tied in (False, True):
            cfg = with_tied(sk, tied).resolve(spec)
            assert count_params(cfg).total == n_params(init_model(cfg))


def test_tied_drops_head():
    spec = VARIANTS["Baseline 12L"]
    untied = count_params(SK.resolve(spec))
    tied = count_params(with_tied(SK).resolve(spec))
    assert untied.total - tied.total == 768 * 50279
    assert tied.lm_head == 0


def test_monotone_in_ffn_scale():
    spec = VARIANTS["Vanilla LWS 18L"]
    totals = [count_params(SK.resolve(spec.with_ffn_scale(s))).total for s in (0.5, 0.8, 1.0, 1.3, 2.0)]
    assert totals == sorted(totals)


def test_vanilla_reverse_mirror_same_count():
    a = ScalingSpec("vanilla", (0.5, 4.0), (0.5, 1.0), 18, framing=True)
    b = ScalingSpec("reverse", (4.0, 0.5), (1.0, 0.5), 18)
    assert count_params(SK.resolve(a)).total == count_params(SK.resolve(b)).total


def test_equalize_unchanged_when_within():
    spec = VARIANTS["Baseline 12L"]
    assert equalize_budget(spec, SK, 181_100_000, 0.01) is spec


def test_equalize_vanilla_to_baseline():
    target = count_params(SK.resolve(VARIANTS["Baseline 18L"])).total
    spec = VARIANTS["Vanilla LWS 18L"]
    out = equalize_budget(spec, SK, target, 0.005)
    got = count_params(SK.resolve(out)).total
    assert abs(got / target - 1) <= 0.005
    assert out.qkv_scalars == spec.qkv_scalars
    assert out.ffn_scalars[0] / spec.ffn_scalars[0] == pytest.approx(out.ffn_scalars[1] / spec.ffn_scalars[1])


def test_equalize_desk_scale_tight():
    sk = Skeleton(d_model=64, vocab_size=256, max_seq_len=256, head_dim=16, n_kv_heads=2)
    target = count_params(sk.resolve(ScalingSpec("uniform", (4.0,), (1.0,), 8))).total
    for spec in [
        ScalingSpec("vanilla", (1.0, 4.0), (0.5, 1.0), 8),
        ScalingSpec("crown", (0.5, 3.8, 0.5), (0.5, 1.0, 0.5), 8),
    ]:
        out = equalize_budget(spec, sk, target, 0.004)
        assert abs(count_params(sk.resolve(out)).total / target - 1) <= 0.004


def test_equalize_infeasible_below_floor():
    floor = 2 * 50279 * 768
    with pytest.raises(InfeasibleBudgetError) as err:
        equalize_budget(VARIANTS["Baseline 12L"], SK, floor // 2, 0.01)
    assert err.value.best_count > floor // 2


def test_equalize_rejects_bad_tolerance():
    with pytest.raises(InvalidArgumentError):
        equalize_budget(VARIANTS["Baseline 12L"], SK, 10**8, 0.0)


def test_spec_table_rows_and_csv():
    rows = emit_spec_table(list(VARIANTS.items()), SK)
    assert len(rows) == 7
    assert rows[0]["fnn_scalars"] == "[4, 4]" and rows[0]["framing"] == "false"
    assert rows[-1]["framing"] == "true"
    parsed = list(csv.DictReader(io.StringIO(rows_to_csv(rows))))
    assert [r["name"] for r in parsed] == list(VARIANTS)


def test_spec_table_empty_is_header_only():
    assert rows_to_csv(emit_spec_table([], SK)).strip() == ",".join(CSV_COLUMNS)


def test_spec_table_identical_specs():
    spec = VARIANTS["Crown LWS"]
    a, b = emit_spec_table([("x", spec), ("x", spec)], SK)
    assert a == b


def test_skeleton_roundtrip_and_unknown_keys():
    assert Skeleton.from_dict(SK.to_dict()) == SK
    with pytest.raises((InvalidArgumentError, TypeError)):
        Skeleton.from_dict({**SK.to_dict(), "bogus": 1})


def test_model_config_roundtrip():
    cfg = SK.resolve(VARIANTS["Crown LWS"])
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
