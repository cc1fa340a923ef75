import init, { driftCurve, policyMap, trainingCurve } from "./pkg/amq_demo_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function call(msg, f) {
  $(msg).textContent = "";
  $(msg).className = "";
  try {
    return JSON.parse(f());
  } catch (e) {
    $(msg).textContent = String(e);
    $(msg).className = "err";
    return null;
  }
}

function linePlot(canvas, series, { yMin, yMax, zeroLine }) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 36;
  ctx.clearRect(0, 0, w, h);
  const xs = series.flatMap((s) => s.points.map((p) => p[0]));
  const ys = series.flatMap((s) => s.points.map((p) => p[1])).filter(Number.isFinite);
  const x0 = Math.min(...xs), x1 = Math.max(...xs);
  const y0 = yMin ?? Math.min(...ys), y1 = yMax ?? Math.max(...ys);
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((Math.min(Math.max(y, y0), y1) - y0) / (y1 - y0 || 1)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#444";
  ctx.fillText(y1.toPrecision(3), 2, pad);
  ctx.fillText(y0.toPrecision(3), 2, h - pad);
  ctx.fillText(String(x0), pad, h - pad + 14);
  ctx.fillText(String(x1), w - pad - 30, h - pad + 14);
  if (zeroLine && y0 < 0 && y1 > 0) {
    ctx.strokeStyle = "#ccc";
    ctx.beginPath();
    ctx.moveTo(pad, sy(0));
    ctx.lineTo(w - pad, sy(0));
    ctx.stroke();
  }
  series.forEach((s, k) => {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.points.forEach(([x, y], i) => (i ? ctx.lineTo(sx(x), sy(y)) : ctx.moveTo(sx(x), sy(y))));
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, w - pad - 60, pad + 14 * (k + 1));
  });
}

function heatMap(canvas, grid) {
  const ctx = canvas.getContext("2d");
  const n = grid.length;
  const cell = canvas.width / n;
  grid.forEach((row, i) =>
    row.forEach((p, j) => {
      const v = Math.round(255 * (1 - p));
      ctx.fillStyle = `rgb(255, ${v}, ${v})`;
      ctx.fillRect(j * cell, canvas.height - (i + 1) * cell, cell, cell);
    }),
  );
}

function runDrift() {
  const r = call("d-msg", () =>
    driftCurve(num("d-lambda"), $("d-mu").value, num("d-c0"), num("d-lo"), num("d-hi"), num("d-steps"), num("d-box"), num("d-shell")),
  );
  if (!r) return;
  $("d-msg").textContent = r.best_nu === null ? "no nu certified" : `best nu ${r.best_nu}`;
  linePlot(
    $("d-plot"),
    [
      { label: "c_V", color: "#1565c0", points: r.points.map((p) => [p.nu, p.c_v]) },
      { label: "c_W", color: "#c62828", points: r.points.map((p) => [p.nu, p.c_w]) },
    ],
    { zeroLine: true },
  );
}

function runMap() {
  const r = call("p-msg", () =>
    policyMap(num("p-lambda"), num("p-mu1"), num("p-mu2"), num("p-c1"), num("p-c2"), num("p-gamma"), num("p-cap")),
  );
  if (!r) return;
  $("p-msg").textContent = `${r.sweeps} Shapley sweeps; x1 grows upward, x2 to the right`;
  heatMap($("p-attack"), r.attack);
  heatMap($("p-defend"), r.defend);
}

function runTrain() {
  const r = call("t-msg", () =>
    trainingCurve($("t-basis").value, num("t-epochs"), num("t-eta0"), num("t-tau"), num("t-seed"), num("t-c0")),
  );
  if (!r) return;
  if (r.diverged_at !== null) {
    $("t-msg").textContent = `diverged at step ${r.diverged_at}`;
    return;
  }
  const last = r.points[r.points.length - 1];
  $("t-msg").textContent = `normalized distance ${last[1].toFixed(3)} after ${last[0]} steps`;
  linePlot($("t-plot"), [{ label: r.basis, color: "#2e7d32", points: r.points }], { yMin: 0 });
  $("t-weights").textContent =
    "learned   " + r.final_weights.map((v) => v.toFixed(3)).join(" ") + "\nreference " + r.reference.map((v) => v.toFixed(3)).join(" ");
}

await init();
$("d-run").onclick = runDrift;
$("p-run").onclick = runMap;
$("t-run").onclick = runTrain;
runMap();
