"""Protocol driver for Python candidate policies.

Usage: ``python -m evpolicy.pydriver <policy_file.py>``

Loads a file that defines ``decide_power(charge_price, discharge_price, soc,
ttd, load_kw, pv_kw, max_charge_kw, max_discharge_kw)`` (an optional trailing
``forecast`` parameter is passed when accepted) and serves it over the
line protocol: handshake line, then one JSON request per line, one decimal
reply per line, until ``{"end": true}``.

Candidate code runs in this separate process, so a crashing or hanging policy
cannot take the simulator down with it.
"""
from __future__ import annotations

import inspect
import json
import sys


def serve(fn, stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    params = list(inspect.signature(fn).parameters)
    wants_forecast = "forecast" in params
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        if msg.get("protocol"):
            continue
        if msg.get("end"):
            break
        args = [msg["charge_price"], msg["discharge_price"], msg["soc"],
                msg["ttd"], msg["load_kw"], msg["pv_kw"],
                msg["max_charge_kw"], msg["max_discharge_kw"]]
        if wants_forecast:
            args.append(msg["forecast"])
        try:
            value = float(fn(*args))
        except Exception as exc:  # noqa: BLE001 - report, let parent decide
            print(f"decide_power raised: {exc}", file=sys.stderr)
            value = 0.0
        stdout.write(f"{value}\n")
        stdout.flush()


def main(argv=None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    if len(argv) != 1:
        print("usage: python -m evpolicy.pydriver <policy_file.py>",
              file=sys.stderr)
        return 2
    namespace: dict = {}
    with open(argv[0]) as fh:
        exec(compile(fh.read(), argv[0], "exec"), namespace)  # noqa: S102
    fn = namespace.get("decide_power")
    if not callable(fn):
        print("policy file does not define decide_power()", file=sys.stderr)
        return 2
    serve(fn)
    return 0


if __name__ == "__main__":
    sys.exit(main())
