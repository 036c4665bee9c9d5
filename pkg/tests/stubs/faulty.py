"""Handshakes correctly, then misbehaves on predict in the way named by argv[1]."""
import json
import sys
import time

mode = sys.argv[1]
for line in sys.stdin:
    msg = json.loads(line)
    if msg["op"] == "info":
        print(json.dumps({"classes": 2, "input_shape": [4, 4]}), flush=True)
        continue
    n = msg["shape"][0]
    if mode == "malformed":
        print("{not json", flush=True)
    elif mode == "wrong-id":
        print(json.dumps({"id": msg["id"] + 1, "probs": [[0.5, 0.5]] * n}), flush=True)
    elif mode == "error":
        print(json.dumps({"id": msg["id"], "error": "model exploded"}), flush=True)
    elif mode == "not-simplex":
        print(json.dumps({"id": msg["id"], "probs": [[0.9, 0.9]] * n}), flush=True)
    elif mode == "exit":
        sys.exit(3)
    elif mode == "hang":
        time.sleep(30)
