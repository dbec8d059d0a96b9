"""Vehicles hop between RSUs; every resolver converges on the newest locator.

    python3 demos/mobility_resolution.py
"""

from iovsim.scenario import bundled_scenarios, load_scenario, run_scenario


def main() -> None:
    result = run_scenario(load_scenario(bundled_scenarios()["mobility"]))
    for e in result.trace:
        if e["kind"] == "dbnr_update":
            print(f"t={e['t']:>5}  {e['node']}  {e.get('reason')}  {e.get('version', '')}")
    print(f"stale cache entries after quiescence: {result.metrics['dbnr_staleness']}")
    print(f"messages still in flight:             {result.metrics['in_flight']}")


if __name__ == "__main__":
    main()
