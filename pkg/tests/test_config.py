"""Tests for the flat key=value config grammar, schema resolution, and
atomic artifact writes."""

import os

import pytest

from lipspline.config import (
    SCHEMAS,
    atomic_open,
    atomic_write_text,
    format_config,
    parse_config_file,
    parse_config_text,
    resolve_config,
    write_resolved_config,
)


class TestGrammar:
    def test_pairs_comments_and_blanks(self):
        text = """
# a comment
target = f3
epochs=25
  width   =  20
"""
        assert parse_config_text(text) == {
            "target": "f3", "epochs": "25", "width": "20"}

    def test_missing_equals(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config_text("just a bare line")

    def test_duplicate_key(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2")

    def test_empty_key(self):
        with pytest.raises(ValueError, match="empty key"):
            parse_config_text("= 3")

    def test_file_round_trip(self, tmp_path):
        path = str(tmp_path / "run.cfg")
        with open(path, "w") as fh:
            fh.write("seed = 7\n")
        assert parse_config_file(path) == {"seed": "7"}


class TestResolution:
    def test_defaults_filled(self):
        resolved = resolve_config("fit1d", {})
        assert resolved["target"] == "f3"
        assert resolved["epochs"] == 100
        assert set(resolved) == set(SCHEMAS["fit1d"])

    def test_typed_coercion(self):
        resolved = resolve_config("train-denoiser", {
            "channels": "1,8,8,1", "sigma255": "15", "spline_shared": "yes",
            "epochs": "3"})
        assert resolved["channels"] == [1, 8, 8, 1]
        assert resolved["sigma255"] == 15.0
        assert resolved["spline_shared"] is True
        assert resolved["epochs"] == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys.*momentum"):
            resolve_config("fit1d", {"momentum": "0.9"})

    def test_unknown_subcommand_rejected(self):
        with pytest.raises(ValueError, match="unknown subcommand"):
            resolve_config("train", {})

    def test_bad_value_type(self):
        with pytest.raises(ValueError, match="expects a int"):
            resolve_config("fit1d", {"epochs": "many"})
        with pytest.raises(ValueError, match="expects a bool"):
            resolve_config("fit1d", {"spline_shared": "maybe"})

    def test_empty_list_value(self):
        resolved = resolve_config("pnp", {"mask": ""})
        assert resolved["mask"] == []


class TestResolvedCopy:
    def test_format_parses_back_identically(self):
        resolved = resolve_config("w1", {"dim": "4", "shift": "2.5"})
        text = format_config("w1", resolved)
        again = resolve_config("w1", parse_config_text(text))
        assert again == resolved

    def test_write_resolved_config(self, tmp_path):
        path = str(tmp_path / "config.resolved")
        resolved = resolve_config("pnp", {"beta": "0.4"})
        write_resolved_config(path, "pnp", resolved)
        with open(path) as fh:
            text = fh.read()
        assert text.startswith("# resolved configuration for subcommand: pnp")
        assert "beta = 0.4" in text
        assert resolve_config("pnp", parse_config_file(path)) == resolved

    def test_every_schema_round_trips(self):
        for sub in SCHEMAS:
            resolved = resolve_config(sub, {})
            text = format_config(sub, resolved)
            assert resolve_config(sub, parse_config_text(text)) == resolved


class TestAtomicWrites:
    def test_content_and_no_leftovers(self, tmp_path):
        path = str(tmp_path / "out.txt")
        atomic_write_text(path, "hello\n")
        with open(path) as fh:
            assert fh.read() == "hello\n"
        assert os.listdir(tmp_path) == ["out.txt"]

    def test_overwrites_existing(self, tmp_path):
        path = str(tmp_path / "out.txt")
        atomic_write_text(path, "first")
        atomic_write_text(path, "second")
        with open(path) as fh:
            assert fh.read() == "second"

    def test_failure_leaves_no_partial_file(self, tmp_path):
        path = str(tmp_path / "out.txt")
        with pytest.raises(RuntimeError):
            with atomic_open(path) as fh:
                fh.write("partial")
                raise RuntimeError("boom")
        assert os.listdir(tmp_path) == []

    def test_read_mode_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="writing"):
            with atomic_open(str(tmp_path / "x"), "r"):
                pass

    def test_binary_mode(self, tmp_path):
        path = str(tmp_path / "blob.bin")
        with atomic_open(path, "wb") as fh:
            fh.write(b"\x00\x01")
        with open(path, "rb") as fh:
            assert fh.read() == b"\x00\x01"
