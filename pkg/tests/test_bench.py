import csv

import pytest
import torch

from tokenfold.bench import (
    bench_cache,
    dimension_sweep,
    granularity_sweep,
    guidance_sweep,
    sampler_config,
    variant_table,
    write_variant_table,
)
from tokenfold.config import (
    CorpusSection,
    RunConfig,
    ScheduleSection,
    TokenizerSection,
    TrainSection,
)
from tokenfold.container import ModelBundle
from tokenfold.decoder import PairDecoder
from tokenfold.diffusion import make_schedule
from tokenfold.dit import DiT, DiTConfig
from tokenfold.ipa import IPAConfig


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    return RunConfig(
        seed=0,
        data_dir=tmp_path_factory.mktemp("bench"),
        tokenizer=TokenizerSection(K=8, w=2, d=8),
        corpus=CorpusSection(length=24, n_per_class=(6, 3, 3), jitter=0.06),
        schedule=ScheduleSection(T=50),
        dit=DiTConfig(
            n_layers=1, d_model=32, n_heads=2, d_ff=64, latent_dim=8, T=50,
            max_len=64, n_ipa_layers=1,
            ipa=IPAConfig(n_heads=2, d_head=8, n_query_points=2, n_value_points=2),
        ),
        train=TrainSection(decoder_steps=40, dit_steps=10, batch_size=4),
    )


@pytest.fixture(scope="module")
def small_models(small_cfg, tiny_codebook):
    torch.manual_seed(0)
    return ModelBundle(codebook=tiny_codebook, decoder=PairDecoder(8), dit=DiT(small_cfg.dit))


@pytest.fixture(scope="module")
def sched50():
    return make_schedule(50)


class TestSamplerConfig:
    def test_pulls_config_sections(self, small_cfg):
        sc = sampler_config(small_cfg, 16, 3)
        assert sc.length == 16
        assert sc.seed == 3
        assert sc.T == 50
        assert sc.eps_cache == small_cfg.sampler.eps_cache

    def test_overrides_win(self, small_cfg):
        sc = sampler_config(small_cfg, 16, 0, eps_cache=0.2, ddim=True)
        assert sc.eps_cache == 0.2
        assert sc.ddim


class TestBenchCache:
    def test_csvs_and_summary(self, small_cfg, small_models, sched50, tmp_path):
        rows = bench_cache(
            small_cfg, small_models, sched50, tmp_path,
            lengths=(16,), eps_list=(0.0, 0.1), seeds=(0, 1), class_label=None,
        )
        assert len(rows) == 4  # 1 length x 2 eps x 2 seeds
        for row in rows:
            if row["eps"] == 0.0:
                assert row["final_rmsd_vs_eps0"] == 0.0
        with open(tmp_path / "bench_steps.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["L", "eps", "seed", "step", "t", "rho", "pair_updates",
                          "projection_ops", "bytes", "wall_ns"]
        with open(tmp_path / "bench_summary.csv") as fh:
            reader = csv.reader(fh)
            assert next(reader) == ["L", "eps", "seed", "total_pair_updates",
                                    "total_wall_ns", "final_rmsd_vs_eps0", "valid"]
            assert len(list(reader)) == 4


class TestVariantTable:
    def test_variants_and_csv(self, small_cfg, small_models, sched50, tmp_path):
        rows = variant_table(small_cfg, small_models, sched50, length=16, n_samples=1,
                             class_label=None)
        assert [r["variant"] for r in rows] == [
            "tokenized", "tokenized+cache", "raw-width-control"
        ]
        assert all(r["mean_step_ms"] > 0 for r in rows)
        out = tmp_path / "variants.csv"
        write_variant_table(out, rows)
        with open(out) as fh:
            header = next(csv.reader(fh))
        assert header == ["variant", "validity_pct", "mean_step_ms", "mean_sample_s"]


class TestAblationHarnesses:
    def test_guidance_sweep_rows(self, small_cfg, small_models, sched50):
        rows = guidance_sweep(small_cfg, small_models, sched50, length=16,
                              w_list=(0.0, 1.0), seeds=(0,))
        assert [r["w"] for r in rows] == [0.0, 1.0]
        assert all(0.0 <= r["validity_pct"] <= 100.0 for r in rows)

    def test_granularity_sweep_token_counts_shrink(self, small_cfg):
        rows = granularity_sweep(small_cfg, pool_ks=(1, 2))
        assert rows[0]["pool_k"] == 1 and rows[1]["pool_k"] == 2
        assert all(r["codebook_used"] <= r["K"] for r in rows)

    def test_dimension_sweep_reports_losses(self, small_cfg):
        rows = dimension_sweep(small_cfg, dims=(4, 8))
        assert [r["d"] for r in rows] == [4, 8]
        assert all(r["final_decoder_loss"] > 0 for r in rows)
