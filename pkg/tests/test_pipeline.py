import numpy as np
import pytest
import torch
import yaml

from tokenfold.cli import main
from tokenfold.config import DATA_DIR_ENV, RunConfig, load_config
from tokenfold.container import ModelBundle, load_bundle, save_bundle
from tokenfold.decoder import PairDecoder
from tokenfold.dit import DiT, DiTConfig
from tokenfold.errors import ConfigError, FormatError, ParseError
from tokenfold.geometry import AtomicBackbone, atoms_from_frames
from tokenfold.ipa import IPAConfig
from tokenfold.metrics import clash_count, evaluate_backbone, evaluate_frames
from tokenfold.pdbio import parse_pdb, parse_pdb_report, write_pdb
from tokenfold.pipeline import build_codebook, make_corpus
from tokenfold.synthetic import (
    SyntheticFoldSpec,
    build_fold,
    generate_synthetic_corpus,
)


def ideal_backbone(L=20, class_id=0):
    return build_fold(SyntheticFoldSpec.for_class(class_id, L))


class TestPdbWrite:
    def test_golden_first_record(self):
        bb = AtomicBackbone(
            n=np.array([[1.0, 2.0, 3.0], [4.5, 5.5, 6.5]]),
            ca=np.array([[1.1, 2.1, 3.1], [4.6, 5.6, 6.6]]),
            c=np.array([[1.2, 2.2, 3.2], [4.7, 5.7, 6.7]]),
        )
        lines = write_pdb(bb).splitlines()
        assert lines[0] == (
            "ATOM      1  N   GLY A   1       1.000   2.000   3.000  1.00  0.00           N"
        )
        assert lines[1].startswith("ATOM      2  CA  GLY A   1")
        assert lines[-1].startswith("TER ")
        assert len(lines) == 7  # 3 atoms x 2 residues + TER

    def test_roundtrip_to_three_decimals(self):
        bb = ideal_backbone(12)
        chains = parse_pdb(write_pdb(bb))
        assert list(chains) == ["A"]
        back = chains["A"]
        assert len(back) == 12
        for a, b in ((back.n, bb.n), (back.ca, bb.ca), (back.c, bb.c)):
            assert np.abs(a - b).max() < 5e-4

    def test_large_coordinates_rejected(self):
        bb = AtomicBackbone(
            n=np.array([[0.0, 0, 0], [3.8, 0, 0]]),
            ca=np.array([[1.0, 0, 0], [4.8, 0, 0]]),
            c=np.array([[2.0, 0, 0], [12000.0, 0, 0]]),
        )
        with pytest.raises(FormatError):
            write_pdb(bb)


class TestPdbParse:
    def test_altloc_b_skipped(self):
        bb = ideal_backbone(4)
        lines = write_pdb(bb).splitlines()
        # mark residue 2's CA as altloc B: the whole residue then lacks a CA
        doctored = []
        for line in lines:
            if line.startswith("ATOM") and " CA " in line and line[22:26].strip() == "2":
                line = line[:16] + "B" + line[17:]
            doctored.append(line)
        chains, dropped = parse_pdb_report("\n".join(doctored))
        assert dropped == 1
        assert len(chains["A"]) == 3

    def test_parse_error_carries_line_number(self):
        text = write_pdb(ideal_backbone(3))
        bad = text.replace("\n", "\n", 0).splitlines()
        bad[2] = bad[2][:30] + "  badfloat" + bad[2][40:]
        with pytest.raises(ParseError) as exc:
            parse_pdb("\n".join(bad))
        assert exc.value.line_number == 3

    def test_non_atom_records_ignored(self):
        text = "HEADER    TEST\nREMARK 1\n" + write_pdb(ideal_backbone(5))
        assert len(parse_pdb(text)["A"]) == 5

    def test_empty_input(self):
        assert parse_pdb("") == {}

    def test_two_chains_separated(self):
        text = write_pdb(ideal_backbone(4), chain_id="A") + write_pdb(
            ideal_backbone(6), chain_id="B"
        )
        chains = parse_pdb(text)
        assert sorted(chains) == ["A", "B"]
        assert len(chains["B"]) == 6


class TestSynthetic:
    def test_helix_bond_lengths(self):
        bb = ideal_backbone(30, class_id=0)
        d = bb.ca_distances()
        assert np.abs(d - 3.8).max() < 0.05

    def test_helix_rise_per_residue(self):
        ca = ideal_backbone(30, class_id=0).ca
        rise = np.linalg.norm(ca[-1] - ca[0]) / 29
        assert abs(rise - 1.5) < 0.2

    def test_strand_is_extended(self):
        ca = ideal_backbone(30, class_id=1).ca
        per_res = np.linalg.norm(ca[-1] - ca[0]) / 29
        assert per_res > 2.8

    def test_corpus_deterministic(self):
        specs = [SyntheticFoldSpec.for_class(c, 24, jitter=0.1) for c in (0, 1, 2)]
        a = generate_synthetic_corpus(specs, seed=5)
        b = generate_synthetic_corpus(specs, seed=5)
        for (fa, ca_), (fb, cb_) in zip(a, b):
            assert ca_ == cb_
            assert np.array_equal(fa.translations, fb.translations)

    def test_seeds_differ_with_jitter(self):
        spec = SyntheticFoldSpec.for_class(0, 24, jitter=0.1)
        a = generate_synthetic_corpus([spec], seed=1)[0][0]
        b = generate_synthetic_corpus([spec], seed=2)[0][0]
        assert not np.array_equal(a.translations, b.translations)

    def test_mixed_class_alternates_segments(self):
        spec = SyntheticFoldSpec.for_class(2, 30)
        kinds = [k for k, _ in spec.segments]
        assert kinds == ["helix", "strand", "helix"]
        assert sum(n for _, n in spec.segments) == 30

    def test_segments_must_tile(self):
        with pytest.raises(ConfigError):
            SyntheticFoldSpec(class_id=0, length=10, segments=(("helix", 7),))

    def test_jitter_needs_rng(self):
        spec = SyntheticFoldSpec.for_class(0, 10, jitter=0.1)
        with pytest.raises(ConfigError):
            build_fold(spec, rng=None)

    def test_unknown_class(self):
        with pytest.raises(ConfigError):
            SyntheticFoldSpec.for_class(5, 10)


class TestMetrics:
    def test_ideal_helix_is_valid(self):
        rep = evaluate_backbone(ideal_backbone(40))
        assert rep.valid
        assert rep.bond_fraction_ok == 1.0
        assert rep.clash_count == 0
        assert rep.radius_of_gyration > 0

    def test_clash_counted_for_nonadjacent_pairs(self):
        ca = np.array([[0.0, 0, 0], [3.8, 0, 0], [0.5, 0.5, 0]])
        assert clash_count(ca) == 1  # residues 0 and 2 overlap
        # adjacent pairs never count
        assert clash_count(np.array([[0.0, 0, 0], [1.0, 0, 0]])) == 0

    def test_broken_chain_invalid(self):
        bb = ideal_backbone(20)
        stretched = AtomicBackbone(n=bb.n * 3, ca=bb.ca * 3, c=bb.c * 3)
        assert not evaluate_backbone(stretched).valid


class TestConfig:
    def write(self, tmp_path, data):
        p = tmp_path / "run.yaml"
        p.write_text(yaml.safe_dump(data))
        return p

    def test_defaults(self, tmp_path):
        cfg = load_config(self.write(tmp_path, {"seed": 3}))
        assert cfg.seed == 3
        assert cfg.data_dir == tmp_path
        assert cfg.schedule.T == 200
        assert cfg.dit.latent_dim == cfg.tokenizer.d

    def test_missing_seed(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(self.write(tmp_path, {"schedule": {"T": 50}}))

    def test_latent_mismatch(self, tmp_path):
        data = {"seed": 0, "tokenizer": {"d": 8}}
        with pytest.raises(ConfigError):
            load_config(self.write(tmp_path, data))

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(self.write(tmp_path, {"seed": 0, "train": {"momentum": 0.9}}))

    def test_require_missing_file(self, tmp_path):
        p = self.write(tmp_path, {"seed": 0})
        with pytest.raises(ConfigError):
            load_config(p, require=("container_path",))

    def test_env_var_overrides_data_dir(self, tmp_path, monkeypatch):
        other = tmp_path / "elsewhere"
        other.mkdir()
        monkeypatch.setenv(DATA_DIR_ENV, str(other))
        cfg = load_config(self.write(tmp_path, {"seed": 0}))
        assert cfg.data_dir == other


def small_yaml(tmp_path):
    data = {
        "seed": 0,
        "tokenizer": {"K": 16, "w": 2, "d": 8},
        "corpus": {"length": 32, "n_per_class": [8, 4, 4], "jitter": 0.06},
        "schedule": {"T": 50},
        "dit": {
            "n_layers": 2, "d_model": 32, "n_heads": 4, "d_ff": 64,
            "latent_dim": 8, "max_len": 64, "n_ipa_layers": 1,
            "ipa": {"n_heads": 2, "d_head": 8, "n_query_points": 2, "n_value_points": 2},
        },
        "train": {"decoder_steps": 60, "dit_steps": 20, "batch_size": 4},
    }
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Config plus an untrained (but loadable) model container."""
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path = small_yaml(tmp_path)
    cfg = load_config(cfg_path)
    cb = build_codebook(cfg)
    cb.save(cfg.resolve(cfg.codebook_path))
    torch.manual_seed(0)
    bundle = ModelBundle(codebook=cb, decoder=PairDecoder(8), dit=DiT(cfg.dit))
    save_bundle(cfg.resolve(cfg.container_path), bundle)
    return tmp_path, cfg_path, cfg, bundle


class TestContainer:
    def test_save_load_roundtrip(self, cli_workspace):
        tmp_path, _, cfg, bundle = cli_workspace
        loaded = load_bundle(cfg.resolve(cfg.container_path))
        assert np.array_equal(loaded.codebook.embeddings, bundle.codebook.embeddings)
        assert loaded.dit_config == bundle.dit_config
        x = torch.randn(6, 8, dtype=torch.float64)
        with torch.no_grad():
            a = bundle.dit(x, 3, torch.tensor(0), frames=None) if bundle.dit.cfg.n_ipa_layers == 0 else None
        for p1, p2 in zip(bundle.dit.parameters(), loaded.dit.parameters()):
            assert torch.equal(p1, p2)
        for p1, p2 in zip(bundle.decoder.parameters(), loaded.decoder.parameters()):
            assert torch.equal(p1, p2)

    def test_version_checked(self, cli_workspace, tmp_path):
        _, _, cfg, bundle = cli_workspace
        blob = torch.load(cfg.resolve(cfg.container_path), weights_only=False)
        blob["version"] = 99
        bad = tmp_path / "bad.pt"
        torch.save(blob, bad)
        with pytest.raises(ConfigError):
            load_bundle(bad)


class TestCorpus:
    def test_make_corpus_counts_and_labels(self, cli_workspace):
        _, _, cfg, _ = cli_workspace
        corpus = make_corpus(cfg)
        labels = [c for _, c in corpus]
        assert len(corpus) == 16
        assert labels.count(0) == 8 and labels.count(1) == 4 and labels.count(2) == 4
        assert all(len(frames) == 32 for frames, _ in corpus)

    def test_deterministic(self, cli_workspace):
        _, _, cfg, _ = cli_workspace
        a = make_corpus(cfg)
        b = make_corpus(cfg)
        assert all(
            np.array_equal(fa.translations, fb.translations)
            for (fa, _), (fb, _) in zip(a, b)
        )


class TestCLI:
    def test_build_codebook_writes_file(self, cli_workspace, capsys):
        tmp_path, cfg_path, cfg, _ = cli_workspace
        assert main(["build-codebook", "--config", str(cfg_path)]) == 0
        assert cfg.resolve(cfg.codebook_path).exists()
        assert "codebook K=16" in capsys.readouterr().out

    def test_sample_writes_structure_and_trajectory(self, cli_workspace, capsys, tmp_path):
        _, cfg_path, _, _ = cli_workspace
        out = tmp_path / "samples"
        rc = main(["sample", "--config", str(cfg_path), "--length", "16",
                   "--out", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "valid=" in printed
        pdb = out / "sample_L16_seed0.pdb"
        traj = out / "trajectory_L16_seed0.csv"
        assert pdb.exists() and traj.exists()
        assert len(parse_pdb(pdb.read_text())["A"]) == 16
        header = traj.read_text().splitlines()[0]
        assert header == "step,t,rho,pair_updates,projection_ops,bytes,wall_ns"

    def test_tokenize_prints_tokens(self, cli_workspace, capsys, tmp_path):
        _, cfg_path, _, _ = cli_workspace
        pdb = tmp_path / "in.pdb"
        pdb.write_text(write_pdb(atoms_from_frames(
            generate_synthetic_corpus([SyntheticFoldSpec.for_class(0, 20, jitter=0.05)], seed=0)[0][0]
        )))
        assert main(["tokenize", "--config", str(cfg_path), str(pdb)]) == 0
        out = capsys.readouterr().out.strip()
        assert out.startswith("A ")
        assert len(out.split()) == 21  # chain id + one token per residue

    def test_config_error_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("schedule: {T: 50}\n")
        assert main(["build-codebook", "--config", str(p)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_container_exit_code(self, tmp_path, capsys):
        cfg_path = small_yaml(tmp_path)
        assert main(["sample", "--config", str(cfg_path)]) == 2
