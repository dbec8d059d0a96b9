"""iovsim: identity ledger, PBFT, authenticated sessions and name resolution for a simulated IoV.

Modules:

``ledger``    identities, blocks and chain validation
``pbft``      the replicated state machine that orders ledger transactions
``bisa``      address-anchored mutual authentication and sealed records
``dbnr``      versioned address -> locator records and resolvers
``vehicle``   per-vehicle component bus and gateway isolation
``simnet``    the deterministic discrete-event network
``scenario``  scenario files, runs and trace verification
"""

__version__ = "0.1.0"
