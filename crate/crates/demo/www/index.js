import init, { trace, spectra, cycles } from "./pkg/consensus_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function guarded(fn) {
  return () => {
    $("status").textContent = "";
    try {
      fn();
    } catch (e) {
      $("status").className = "err";
      $("status").textContent = String(e.message ?? e);
    }
  };
}

// Log-scale error curve, with node values on a linear axis underneath.
function draw(data, showNodes) {
  const c = $("plot");
  const ctx = c.getContext("2d");
  const w = c.width, h = c.height, pad = 40;
  ctx.clearRect(0, 0, w, h);
  const half = showNodes ? h / 2 : h;

  const errs = data.errors.map((v) => Math.max(v, 1e-6));
  const lo = Math.log10(Math.min(...errs)), hi = Math.log10(Math.max(...errs));
  const span = Math.max(hi - lo, 1e-9);
  const sx = (k, len) => pad + (k / Math.max(len - 1, 1)) * (w - 2 * pad);

  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, 4, w - 2 * pad, half - 20);
  ctx.fillStyle = "#444";
  ctx.fillText(`iterative error (log), ${errs.length} iterations`, pad + 4, 16);
  ctx.fillText(hi.toFixed(1), 4, 14);
  ctx.fillText(lo.toFixed(1), 4, half - 18);
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  errs.forEach((v, k) => {
    const y = 4 + (1 - (Math.log10(v) - lo) / span) * (half - 20);
    k ? ctx.lineTo(sx(k, errs.length), y) : ctx.moveTo(sx(k, errs.length), y);
  });
  ctx.stroke();

  if (!showNodes || data.values.length === 0) return;
  const rows = data.values;
  let vmin = Infinity, vmax = -Infinity;
  for (const row of rows) for (const v of row) { vmin = Math.min(vmin, v); vmax = Math.max(vmax, v); }
  const vspan = Math.max(vmax - vmin, 1e-9);
  const top = half + 4, height = h - half - 24;
  const sy = (v) => top + (1 - (v - vmin) / vspan) * height;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, top, w - 2 * pad, height);
  ctx.fillStyle = "#444";
  ctx.fillText(`node values, first ${rows.length} iterations`, pad + 4, top + 12);
  ctx.fillText(vmax.toFixed(0), 4, top + 10);
  ctx.fillText(vmin.toFixed(0), 4, top + height);
  const n = rows[0].length;
  for (let i = 0; i < n; i++) {
    ctx.strokeStyle = `hsl(${(360 * i) / n}, 60%, 45%)`;
    ctx.beginPath();
    rows.forEach((row, k) => {
      k ? ctx.lineTo(sx(k, rows.length), sy(row[i])) : ctx.moveTo(sx(k, rows.length), sy(row[i]));
    });
    ctx.stroke();
  }
  ctx.setLineDash([4, 4]);
  ctx.strokeStyle = "#000";
  ctx.beginPath();
  ctx.moveTo(pad, sy(data.x_avg));
  ctx.lineTo(w - pad, sy(data.x_avg));
  ctx.stroke();
  ctx.setLineDash([]);
}

function runTrace() {
  const data = JSON.parse(
    trace($("algo").value, num("n"), num("e"), num("delta"), num("rho"), num("seed"), num("maxIter")),
  );
  draw(data, $("showNodes").checked);
  const s = { ...data.summary, x_avg: data.x_avg };
  if (data.time_per_edge !== null) s.time_per_edge = data.time_per_edge;
  $("summary").textContent = JSON.stringify(s, null, 2);
}

function runSpectra() {
  const s = JSON.parse(spectra(num("n"), num("e"), num("rho"), num("seed")));
  const fmt = (xs) => xs.map((x) => x.toFixed(4)).join(" ");
  $("spectra").textContent = [
    `sigma_max(M+)     ${s.sigma_max_m_plus.toFixed(6)}`,
    `sigma_min(M-)     ${s.sigma_min_m_minus.toFixed(6)}`,
    `sigma_max(M-)     ${s.sigma_max_m_minus.toFixed(6)}`,
    `delta             ${s.delta.toFixed(6)}`,
    `contraction       ${s.contraction.toFixed(6)}`,
    `L- spectrum       ${fmt(s.l_minus_spectrum)}`,
    `L+ spectrum       ${fmt(s.l_plus_spectrum)}`,
  ].join("\n");
}

function runCycles() {
  const rows = JSON.parse(cycles(num("n"), num("trials"), num("seed")));
  const head = "<tr><th>family</th><th>algorithm</th><th>converged</th><th>cyclic</th><th>capped</th><th>mean error</th></tr>";
  const body = rows
    .map((r) => `<tr><td>${r.family}</td><td>${r.algorithm}</td><td>${r.converged}</td>` +
      `<td>${r.cyclic}</td><td>${r.capped}</td><td>${r.mean_error.toFixed(4)}</td></tr>`)
    .join("");
  $("cycles").innerHTML = `<table>${head}${body}</table>`;
}

await init();
$("runBtn").onclick = guarded(runTrace);
$("spectraBtn").onclick = guarded(runSpectra);
$("cyclesBtn").onclick = guarded(runCycles);
guarded(runTrace)();
