import init, {
  telegraph_path,
  stationary_fault,
  simulate,
  channel_count,
  autocorrelation,
} from "./pkg/busemu_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function plot(canvas, series, colors) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let lo = Infinity, hi = -Infinity;
  for (const s of series) for (const v of s) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  if (hi === lo) { hi += 1; lo -= 1; }
  const pad = 6, h = canvas.height - 2 * pad;
  series.forEach((s, k) => {
    ctx.strokeStyle = colors[k % colors.length];
    ctx.beginPath();
    const stride = Math.max(1, Math.floor(s.length / canvas.width));
    for (let i = 0; i < s.length; i += stride) {
      const x = (i / (s.length - 1)) * canvas.width;
      const y = pad + h - ((s[i] - lo) / (hi - lo)) * h;
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    }
    ctx.stroke();
  });
}

let lastP = null;

function runTelegraph() {
  try {
    const path = telegraph_path(num("tg-onset"), num("tg-clear"), 0.1, num("tg-n"), BigInt(num("tg-seed")));
    const occ = path.reduce((a, b) => a + b, 0) / path.length;
    const exact = stationary_fault(num("tg-onset"), num("tg-clear"));
    $("tg-out").textContent = `fault occupancy ${occ.toFixed(4)} (stationary ${exact.toFixed(4)})`;
    plot($("tg-plot"), [Array.from(path.slice(0, 20000))], ["#c33"]);
  } catch (e) {
    $("tg-out").textContent = `error: ${e.message ?? e}`;
  }
}

function runSimulation() {
  try {
    const flat = simulate(num("sim-dur"), num("sim-r"), num("sim-x"), BigInt(num("sim-seed")));
    const len = flat.length / channel_count();
    const ch = (k) => flat.subarray(k * len, (k + 1) * len);
    lastP = ch(0);
    const v = ch(2);
    $("sim-out").textContent = `${len} samples; V in [${Math.min(...v).toFixed(3)}, ${Math.max(...v).toFixed(3)}] pu`;
    plot($("sim-plot"), [ch(0), ch(1), ch(2)], ["#236", "#4a4", "#c70"]);
  } catch (e) {
    lastP = null;
    $("sim-out").textContent = `error: ${e.message ?? e}`;
  }
}

function runAutocorrelation() {
  if (!lastP) runSimulation();
  if (!lastP) return;
  try {
    const r = autocorrelation(lastP, num("ac-lag"));
    const band = 3 / Math.sqrt(lastP.length);
    $("ac-out").textContent = `r[1] = ${r[1].toFixed(3)}, white-noise band ±${band.toFixed(3)}`;
    plot($("ac-plot"), [r, r.map(() => band), r.map(() => -band)], ["#236", "#aaa", "#aaa"]);
  } catch (e) {
    $("ac-out").textContent = `error: ${e.message ?? e}`;
  }
}

await init();
$("tg-run").onclick = runTelegraph;
$("sim-run").onclick = runSimulation;
$("ac-run").onclick = runAutocorrelation;
runTelegraph();
runSimulation();
runAutocorrelation();
