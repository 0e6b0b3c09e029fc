"""Regenerate the synthetic profiles shipped next to this script.

Run from anywhere: ``python3 scenarios/profiles/make_profiles.py``.
"""

from pathlib import Path

from dcmicrogrid.scenario import (
    EnvProfile,
    LoadProfile,
    clear_day_env,
    load_low_netload_day,
    load_normal_day,
    write_env_csv,
    write_load_csv,
)

HERE = Path(__file__).resolve().parent


def main():
    write_env_csv(clear_day_env(), HERE / "clear_day_env.csv")
    write_load_csv(load_normal_day(1500.0), HERE / "normal_day_load.csv")
    write_load_csv(load_low_netload_day(1200.0), HERE / "low_netload_load.csv")
    # transient test bench: flat sun and load, the step comes from an injection
    write_env_csv(EnvProfile((0.0,), (1000.0,), (25.0,)), HERE / "stc_env.csv")
    write_load_csv(LoadProfile((0.0,), (2500.0,)), HERE / "flat_2500w_load.csv")


if __name__ == "__main__":
    main()
