"""Regenerate the bundled controller config from the bundled robot model."""

import numpy as np

from reactive_control.controller import bundled_config_path, config_to_dict, default_config
from reactive_control.model import dump_yaml, load_model

# arms slightly raised and bent, hands in front of the belly, palms down
HOME_DEG = {
    "r_shoulder_pitch": 30.0,
    "r_shoulder_roll": -20.0,
    "r_elbow": 60.0,
    "l_shoulder_pitch": 30.0,
    "l_shoulder_roll": 20.0,
    "l_elbow": 60.0,
}


def main() -> None:
    chain = load_model()
    home = np.zeros(chain.dof)
    for name, deg in HOME_DEG.items():
        home[chain.link_index(name)] = np.deg2rad(deg)
    cfg = default_config(chain, home=home)
    cfg.validate(chain)
    dump_yaml(config_to_dict(cfg, chain), bundled_config_path())
    print(bundled_config_path())


if __name__ == "__main__":
    main()
