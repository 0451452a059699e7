import pytest

from progseg.config import PARSERS, Config, parse_config, parse_text
from progseg.errors import ConfigError


def test_empty_file_gives_desk_defaults(tmp_path):
    p = tmp_path / "empty.conf"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg == Config()
    assert cfg.stages == (8, 16, 32, 64) and cfg.iterations == 6000 and cfg.batch_size == 16


def test_learning_rate_literal():
    assert parse_text("lr = 0.0002\n").lr == 0.0002


def test_comments_and_whitespace():
    cfg = parse_text("# header\n  seed=3   # trailing\n\nstages = 8, 16,32,64\n")
    assert cfg.seed == 3 and cfg.stages == (8, 16, 32, 64)


def test_non_doubling_stages_name_key_and_line():
    with pytest.raises(ConfigError) as e:
        parse_text("seed = 1\nstages = 8,24\n")
    assert e.value.key == "stages" and e.value.line == 2
    assert "'stages'" in str(e.value) and "line 2" in str(e.value)


@pytest.mark.parametrize("text,key,line", [
    ("colour = red\n", "colour", 1),
    ("seed = 1\nseed = 2\n", "seed", 2),
    ("\nlambda_l1 = -1\n", "lambda_l1", 2),
    ("batch_size = many\n", "batch_size", 1),
    ("lr = nan\n", "lr", 1),
    ("discriminator_sees_input = maybe\n", "discriminator_sees_input", 1),
    ("modes = unet,cnn\n", "modes", 1),
])
def test_errors_name_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as e:
        parse_text(text)
    assert (e.value.key, e.value.line) == (key, line)


def test_missing_equals_names_line():
    with pytest.raises(ConfigError) as e:
        parse_text("seed = 1\njust words\n")
    assert e.value.line == 2


def test_overrides_win_over_file():
    cfg = parse_text("seed = 1\nlr = 0.1\n", {"seed": "9", "lr": 0.5})
    assert cfg.seed == 9 and cfg.lr == 0.5


def test_override_errors_have_no_line():
    with pytest.raises(ConfigError) as e:
        parse_text("seed = 1\n", {"seed": "x"})
    assert e.value.key == "seed" and e.value.line is None


def test_full_scale_preset():
    cfg = parse_text("preset = full\n")
    assert cfg.stages[-1] == 256 and cfg.batch_size == 64 and cfg.iterations == 32000
    assert cfg.widths == (64, 128, 256, 512, 512, 512, 512, 512)
    assert parse_text("preset = full\nbatch_size = 8\n").batch_size == 8


def test_text_round_trip():
    cfg = parse_text("seed = 4\nstages = 4,8,16\nwidths = 4,8,8,8\ndropout = 0.25\n")
    assert parse_text(cfg.to_text()) == cfg


def test_every_field_has_a_parser():
    assert set(PARSERS) == set(Config().to_dict())


def test_digest_ignores_output_location():
    a = parse_text("out_dir = a\nn_jobs = 2\n")
    b = parse_text("out_dir = b\n")
    assert a.digest() == b.digest()
    assert a.digest() != parse_text("seed = 1\n").digest()


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.conf")
