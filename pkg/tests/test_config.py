import pytest

from cosea.config import RunConfig
from cosea.errors import ConfigurationError, ParseError


def test_parse_types_and_comments():
    cfg = RunConfig.parse("""
# a comment
embed_dim = 32
kernel_sizes = 3, 5   # trailing comment
layer_attention = false
margin = 0.3
loss = sampled
""")
    assert cfg["embed_dim"] == 32 and cfg["kernel_sizes"] == (3, 5)
    assert cfg["layer_attention"] is False and cfg["margin"] == 0.3 and cfg["loss"] == "sampled"
    assert cfg["seed"] == 0


def test_unknown_key_line_number():
    with pytest.raises(ParseError, match="line 2"):
        RunConfig.parse("seed = 1\nbogus = 2\n")


def test_bad_value_line_number():
    with pytest.raises(ParseError, match="line 1"):
        RunConfig.parse("epochs = many\n")


def test_missing_equals():
    with pytest.raises(ParseError):
        RunConfig.parse("epochs 3\n")


def test_overrides():
    cfg = RunConfig.parse("epochs = 3\n")
    cfg.apply_overrides(["epochs=5", "lr=0.01"])
    assert cfg["epochs"] == 5 and cfg["lr"] == 0.01
    with pytest.raises(ConfigurationError):
        cfg.apply_overrides(["epochs"])


def test_require():
    with pytest.raises(ConfigurationError, match="data_dir"):
        RunConfig.parse("").require("data_dir")


def test_digest_ignores_paths_only():
    a = RunConfig.parse("data_dir = /a\nepochs = 3\n")
    b = RunConfig.parse("data_dir = /b\nepochs = 3\n")
    c = RunConfig.parse("data_dir = /a\nepochs = 4\n")
    assert a.digest() == b.digest() != c.digest()
    assert len(a.digest()) == 16
