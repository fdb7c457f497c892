"""Shared test utilities: image generators, a stub judge server, and
central finite differences over parameter dictionaries."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
from scipy import ndimage


def textured(seed=0, size=32, c=3):
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.random((size, size, c)), sigma=(1.0, 1.0, 0))
    return np.clip(0.5 + 3.0 * (base - base.mean()), 0, 1)


def isotropic(seed=0, size=32):
    """Transpose-symmetric texture, so its mean |Gx| and |Gy| agree exactly."""
    t = textured(seed, size)
    return 0.5 * (t + t.transpose(1, 0, 2))


def fd_grad(f, params, h=1e-5, coords=None):
    """Central differences of scalar ``f`` w.r.t. each entry of ``params``.

    ``coords`` optionally restricts the check to ``{name: [flat indices]}``;
    unchecked entries come back as NaN.
    """
    out = {}
    for k, v in params.items():
        g = np.full(v.shape, np.nan)
        idxs = range(v.size) if coords is None else coords.get(k, ())
        for i in idxs:
            idx = np.unravel_index(i, v.shape)
            up = {kk: np.array(vv, dtype=float) for kk, vv in params.items()}
            dn = {kk: np.array(vv, dtype=float) for kk, vv in params.items()}
            up[k][idx] += h
            dn[k][idx] -= h
            g[idx] = (f(up) - f(dn)) / (2 * h)
        out[k] = g
    return out


def assert_grads_close(analytic, numeric, rtol, atol=1e-7):
    for k, num in numeric.items():
        mask = ~np.isnan(num)
        np.testing.assert_allclose(np.asarray(analytic[k])[mask], num[mask], rtol=rtol, atol=atol, err_msg=k)


class StubServer:
    """Serves canned replies and records request bodies."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.bodies = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers["Content-Length"])
                outer.bodies.append(json.loads(self.rfile.read(n)))
                reply = outer.replies.pop(0) if len(outer.replies) > 1 else outer.replies[0]
                data = reply.encode()
                self.send_response(200)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/judge"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
