"""Protocol child replying +7.0 below 30% SoC, 0 otherwise."""
import json
import sys

for line in sys.stdin:
    line = line.strip()
    if not line:
        continue
    msg = json.loads(line)
    if msg.get("protocol"):
        continue
    if msg.get("end"):
        break
    sys.stdout.write("7.0\n" if msg["soc"] < 0.3 else "0\n")
    sys.stdout.flush()
