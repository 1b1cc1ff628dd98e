import init, { at_branches, swap, wigner_grid } from "./pkg/magnon_web.js";

const $ = (id) => document.getElementById(id);

function t1(id) {
  const v = $(id).value.trim();
  return v === "" ? Infinity : Number(v);
}

// Draws one or more series of [x, y] pairs with simple axes.
function plot(canvas, series, xlabel, ylabel) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 56;
  ctx.clearRect(0, 0, w, h);
  const all = series.flatMap((s) => s.points);
  const xs = all.map((p) => p[0]), ys = all.map((p) => p[1]);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (y1 === y0) { y0 -= 1; y1 += 1; }
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 1.5 * pad);
  const sy = (y) => h - pad - ((y - y0) / (y1 - y0)) * (h - 1.5 * pad);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, pad / 2, w - 1.5 * pad, h - 1.5 * pad);
  ctx.fillStyle = "#333";
  ctx.font = "20px sans-serif";
  ctx.fillText(xlabel, w / 2 - 40, h - 12);
  ctx.fillText(x0.toPrecision(3), pad, h - pad + 24);
  ctx.fillText(x1.toPrecision(3), w - pad - 30, h - pad + 24);
  ctx.fillText(y1.toPrecision(4), 2, pad / 2 + 16);
  ctx.fillText(y0.toPrecision(4), 2, h - pad);
  ctx.save();
  ctx.translate(16, h / 2 + 40);
  ctx.rotate(-Math.PI / 2);
  ctx.fillText(ylabel, 0, 0);
  ctx.restore();
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.points.forEach(([x, y], i) => (i ? ctx.lineTo(sx(x), sy(y)) : ctx.moveTo(sx(x), sy(y))));
    ctx.stroke();
  }
}

// Diverging colour map: blue negative, red positive, scaled to 2/π.
function heatmap(canvas, values, n) {
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / n, scale = 2 / Math.PI;
  for (let k = 0; k < values.length; k++) {
    const i = k % n, j = Math.floor(k / n);
    const v = Math.max(-1, Math.min(1, values[k] / scale));
    const c = Math.round(255 * (1 - Math.abs(v)));
    ctx.fillStyle = v >= 0 ? `rgb(255,${c},${c})` : `rgb(${c},${c},255)`;
    ctx.fillRect(i * cell, canvas.height - (j + 1) * cell, cell, cell);
  }
}

async function run(statusId, work) {
  const status = $(statusId);
  status.textContent = "computing...";
  await new Promise((r) => setTimeout(r, 10));
  const start = performance.now();
  try {
    const msg = work();
    status.textContent = `${msg} (${((performance.now() - start) / 1000).toFixed(2)} s)`;
  } catch (e) {
    status.textContent = `error: ${e}`;
  }
}

function rows(flat, width) {
  const out = [];
  for (let i = 0; i < flat.length; i += width) out.push(Array.from(flat.slice(i, i + width)));
  return out;
}

await init();

$("at-run").onclick = () => run("at-status", () => {
  const r = rows(at_branches(Number($("at-amp").value), 80, Number($("at-det").value)), 3);
  plot($("at-plot"), [
    { color: "#c33", points: r.map((x) => [x[0], x[1]]) },
    { color: "#36c", points: r.map((x) => [x[0], x[2]]) },
  ], "Ωd (MHz)", "frequency (GHz)");
  const last = r[r.length - 1];
  return `splitting ${((last[1] - last[2]) * 1e3).toFixed(2)} MHz at Ωd = ${last[0]} MHz`;
});

$("swap-run").onclick = () => run("swap-status", () => {
  const r = rows(swap(t1("swap-t1"), Number($("swap-tau").value), 201), 2);
  plot($("swap-plot"), [{ color: "#c33", points: r }], "τ (ns)", "P₊");
  let k = 1;
  while (k < r.length - 1 && !(r[k][1] <= r[k - 1][1] && r[k][1] <= r[k + 1][1])) k++;
  return `first minimum near ${r[k][0].toFixed(1)} ns, P₊ = ${r[k][1].toFixed(3)}`;
});

$("w-run").onclick = () => run("w-status", () => {
  const n = 41;
  const w = wigner_grid($("w-state").value, t1("w-t1"), 2.0, n);
  heatmap($("w-plot"), w, n);
  return `W(0) = ${w[(n * n - 1) / 2].toFixed(3)}, range [${Math.min(...w).toFixed(3)}, ${Math.max(...w).toFixed(3)}]`;
});
