"""Run every bundled attack scenario and print the metrics that matter for it.

    python3 demos/attack_tour.py
"""

from iovsim.scenario import bundled_scenarios, load_scenario, run_scenario

HIGHLIGHTS = {
    "sybil": ["fake_identities", "fake_sessions", "handshake_causes"],
    "impersonation": ["fake_sessions", "handshake_causes"],
    "mitm": ["sessions_established", "handshake_causes"],
    "tamper": ["sessions_established", "handshake_causes"],
    "black_hole": ["delivered", "adversary_dropped", "delivery_ratio"],
    "grey_hole": ["grey_hole_seen", "grey_hole_dropped", "grey_hole_drop_fraction"],
    "dos": ["processed_by_node", "expired"],
    "ddos": ["processed_by_node", "expired"],
    "attack_suite": ["ext_to_sensitive", "ext_to_nonsensitive", "bus_blocked"],
}


def main() -> None:
    paths = bundled_scenarios()
    for name, keys in HIGHLIGHTS.items():
        result = run_scenario(load_scenario(paths[name]))
        print(f"{name:14s} {'PASS' if result.passed else 'FAIL'}")
        for key in keys:
            print(f"    {key}: {result.metrics.get(key)}")


if __name__ == "__main__":
    main()
