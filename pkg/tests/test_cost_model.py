from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specrl.cost_model import (
    CapacityError,
    FlatCost,
    HardwareProfile,
    ModelProfile,
    RooflineCost,
    ShardingPlan,
    breakeven_cycle_overhead,
    decode_step_latency,
    draft_latency,
    load_profile_dict,
    prefill_latency,
    ridge_batch,
    shipped_profiles,
    step_cost,
    tensor_parallel_comm_s,
    verify_step_latency,
    weight_traffic_bytes,
)

HW = HardwareProfile("toy", hbm_bandwidth_bytes_per_s=1e12, peak_flops_per_s=1e15,
                     hbm_capacity_bytes=100e9, interconnect_bandwidth_bytes_per_s=1e11,
                     per_layer_comm_latency_s=1e-5)
DENSE = ModelProfile("dense", total_params=10e9, active_params_per_token=10e9, num_layers=10,
                     hidden_size=1000, bytes_per_param=2)
MOE = ModelProfile("moe", total_params=100e9, active_params_per_token=10e9, num_layers=10,
                   hidden_size=1000, bytes_per_param=1, expert_spread_factor=2)


def test_memory_bound_decode_by_hand():
    # 20 GB of weights at 1 TB/s
    assert decode_step_latency(HW, DENSE, ShardingPlan(1), 1) == pytest.approx(0.02)


def test_compute_bound_decode_by_hand():
    # 2 * 10e9 * 1000 flops at 1e15 flop/s = 0.02 s; memory also 0.02 s at ridge 1000
    assert ridge_batch(HW, DENSE) == pytest.approx(1000.0)
    assert decode_step_latency(HW, DENSE, ShardingPlan(1), 4000) == pytest.approx(0.08)


def test_verify_scales_compute_only():
    plan = ShardingPlan(1)
    # memory bound at small batch: verifying 4 tokens costs one decode
    assert verify_step_latency(HW, DENSE, plan, 10, 3) == pytest.approx(decode_step_latency(HW, DENSE, plan, 10))
    # compute bound: (k + 1) times
    assert verify_step_latency(HW, DENSE, plan, 4000, 3) == pytest.approx(4 * 0.08)


def test_kv_term_adds_memory():
    m = ModelProfile("kv", 10e9, 10e9, 10, 1000, 2, kv_bytes_per_token=1000.0)
    t0 = decode_step_latency(HW, m, ShardingPlan(1), 8, 0)
    t1 = decode_step_latency(HW, m, ShardingPlan(1), 8, 1e7)
    assert t1 - t0 == pytest.approx(1e10 / 1e12)


def test_moe_traffic_saturates():
    assert weight_traffic_bytes(MOE, 1) == pytest.approx(20e9)
    assert weight_traffic_bytes(MOE, 1000) == pytest.approx(100e9)


def test_sharding_efficiency_and_comm():
    plan = ShardingPlan(8, tensor_parallel=8, sharding_penalty=0.04)
    assert plan.sharding_efficiency == pytest.approx(1 / (1 + 0.04 * 3))
    # 2 all-reduces x 10 layers x 100 tokens x 1000 hidden x 2 bytes x 2*(7/8) / 1e11
    assert tensor_parallel_comm_s(HW, DENSE, plan, 100) == pytest.approx(2 * 10 * 100 * 1000 * 2 * 1.75 / 1e11)
    assert tensor_parallel_comm_s(HW, DENSE, ShardingPlan(1), 100) == 0.0


def test_pipeline_bubble():
    plan = ShardingPlan(4, pipeline_parallel=4, sharding_penalty=0.0)
    # 20 GB over 4 GPUs at 1 TB/s, plus three stage hops
    assert decode_step_latency(HW, DENSE, plan, 1) == pytest.approx(0.005 + 3e-5)


def test_sharding_product_error():
    with pytest.raises(ValueError, match="gpus_per_instance"):
        ShardingPlan(8, tensor_parallel=4, pipeline_parallel=4)


def test_capacity_error():
    big = ModelProfile("big", 1e12, 1e12, 10, 1000, 2)
    with pytest.raises(CapacityError):
        RooflineCost(HW, big, ShardingPlan(1))


def test_batch_must_be_positive():
    with pytest.raises(ValueError):
        decode_step_latency(HW, DENSE, ShardingPlan(1), 0)


def test_draft_and_prefill():
    assert draft_latency(DENSE, 3, 0.01, 0.1) == pytest.approx(0.003)
    assert prefill_latency(HW, DENSE, ShardingPlan(1), 1000) == pytest.approx(2e13 / 1e15)
    sc = step_cost(HW, DENSE, ShardingPlan(1), 16, 3, 512)
    assert sc.verify_step_s >= sc.decode_step_s


def test_breakeven_overhead_formula():
    plan = ShardingPlan(1)
    d = decode_step_latency(HW, DENSE, plan, 16)
    v = verify_step_latency(HW, DENSE, plan, 16, 3)
    h = breakeven_cycle_overhead(HW, DENSE, plan, 16, 3, 2.5, fraction=0.1)
    assert h == pytest.approx(2.5 * d - v - 0.3 * d)


def test_array_broadcast():
    b = np.array([1, 10, 1000, 4000])
    out = decode_step_latency(HW, DENSE, ShardingPlan(1), b)
    assert out.shape == (4,)
    assert np.all(np.diff(out) >= 0)


@settings(max_examples=100, deadline=None)
@given(b1=st.integers(1, 10_000), b2=st.integers(1, 10_000), k=st.integers(0, 8),
       g=st.sampled_from([1, 2, 4, 8, 16]))
def test_latency_monotone_in_batch_and_k(b1, b2, k, g):
    plan = ShardingPlan(g, tensor_parallel=g)
    lo, hi = sorted((b1, b2))
    assert decode_step_latency(HW, MOE, plan, lo) <= decode_step_latency(HW, MOE, plan, hi) + 1e-15
    assert verify_step_latency(HW, MOE, plan, lo, k) <= verify_step_latency(HW, MOE, plan, lo, k + 1) + 1e-15


def test_flat_cost():
    c = FlatCost(0.01, 0.02, 1.0, 0.1)
    assert c.prefill(100) == 1.0
    assert np.all(c.verify(np.array([3, 4]), 0, 3) == 0.02)
    assert c.draft(2, 0.01) == pytest.approx(0.002)


def test_shipped_profiles_load():
    kinds = shipped_profiles()
    for name in kinds["hardware"]:
        HardwareProfile.from_dict(load_profile_dict("hardware", name))
    for name in kinds["model"]:
        m = ModelProfile.from_dict(load_profile_dict("model", name))
        assert math.isfinite(m.weight_bytes)


def test_unknown_profile():
    with pytest.raises(FileNotFoundError):
        load_profile_dict("model", "no_such_model")
