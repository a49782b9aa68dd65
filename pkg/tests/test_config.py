import pytest

from dualmix.config import ConfigError, RunConfig, parse_config, read_config_file


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg == RunConfig()
        assert (cfg.lambda_kl, cfg.lambda_ce, cfg.pseudo_portion, cfg.pseudo_threshold) == (0.5, 1.0, 0.5, 0.9)
        assert (cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.poly_power) == (2.5e-4, 0.9, 1e-4, 0.9)

    def test_negative_weight_names_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("lambda_kl = -1\n")
        with pytest.raises(ConfigError) as err:
            parse_config(path)
        assert err.value.key == "lambda_kl"
        assert "lambda_kl" in str(err.value)

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "r.cfg"
        path.write_text("rounds = 4\nseed = 9\n")
        cfg = parse_config(path, {"rounds": 2})
        assert cfg.rounds == 2 and cfg.seed == 9
        assert parse_config(path, {"rounds": "3"}).rounds == 3

    def test_comments_and_types(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# header\n  iters = 100  # trailing\nstyle_transfer = false\n"
                        "target_gain = 1.0, 0.5, 2.0\ndata_seed = none\nmode = vanilla_st\n")
        values = read_config_file(path)
        assert values == {"iters": 100, "style_transfer": False, "target_gain": (1.0, 0.5, 2.0),
                          "data_seed": None, "mode": "vanilla_st"}

    @pytest.mark.parametrize("line,key", [("colour = red", "colour"), ("iters = lots", "iters"),
                                          ("pseudo_portion = 1.5", "pseudo_portion"), ("mode = fancy", "mode"),
                                          ("style_transfer = maybe", "style_transfer"),
                                          ("data_dir = /no/such/dir", "data_dir")])
    def test_errors_name_the_key(self, tmp_path, line, key):
        path = tmp_path / "e.cfg"
        path.write_text(line + "\n")
        with pytest.raises(ConfigError) as err:
            parse_config(path)
        assert err.value.key == key

    def test_missing_equals(self, tmp_path):
        path = tmp_path / "e.cfg"
        path.write_text("rounds 3\n")
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_dict_round_trip(self):
        cfg = RunConfig(seed=5, target_gain=(1.0, 1.1, 1.2), rounds=2)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"sede": 1})

    def test_dataset_config_carries_style(self):
        ds = RunConfig(seed=4, target_noise_sigma=0.1, target_blur=False).dataset_config()
        assert ds.seed == 4 and ds.target_style.noise_sigma == 0.1 and not ds.target_style.blur_enabled
        assert RunConfig(seed=4, data_seed=8).dataset_config().seed == 8
