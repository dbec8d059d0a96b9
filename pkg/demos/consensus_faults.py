"""Four validators, one of them faulty: watch the honest three agree anyway.

    python3 demos/consensus_faults.py
"""

from iovsim.cluster import Cluster


def run(behaviour: str, seed: int = 3) -> None:
    cluster = Cluster(4, seed=seed, byzantine={0: behaviour}, random_split=True)
    for i in range(3):
        client = cluster.add_client(f"veh{i}")
        cluster.submit(client, [cluster.registration_for(client)], timestamp=i + 1)
    cluster.run()
    print(f"primary behaviour: {behaviour}")
    print(f"  all requests accepted: {cluster.all_accepted()}")
    print(f"  highest view reached:  {cluster.max_view()}")
    print(f"  honest disagreements:  {len(cluster.disagreements())}")
    for replica in cluster.honest:
        heights = [b.height for b in replica.blocks]
        print(f"  replica {replica.address.hex()[:8]}: chain heights {heights}, view {replica.view}")


if __name__ == "__main__":
    for behaviour in ("crash", "equivocate"):
        run(behaviour)
        print()
