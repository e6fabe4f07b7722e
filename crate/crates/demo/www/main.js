import init, { training_curves, redirect_walkthrough, advantages } from "./pkg/stride_demo.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400"];
let curves = [];

function status(text) {
  $("status").textContent = text;
}

function escape(s) {
  return s.replace(/[&<>]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;" })[c]);
}

// Run after the status line has had a chance to paint.
function later(fn) {
  return new Promise((resolve) => setTimeout(() => resolve(fn()), 20));
}

function draw() {
  const canvas = $("curves");
  const ctx = canvas.getContext("2d");
  const series = $("curve-series").value;
  const W = canvas.width, H = canvas.height, pad = 40;
  ctx.clearRect(0, 0, W, H);
  ctx.strokeStyle = "#ccc";
  ctx.fillStyle = "#666";
  ctx.font = "11px sans-serif";
  const maxCycle = Math.max(1, ...curves.map((c) => c.cycle.length));
  const x = (i) => pad + (i / maxCycle) * (W - 2 * pad);
  const y = (v) => H - pad - v * (H - 2 * pad);
  for (let v = 0; v <= 1.0001; v += 0.25) {
    ctx.beginPath();
    ctx.moveTo(pad, y(v));
    ctx.lineTo(W - pad, y(v));
    ctx.stroke();
    ctx.fillText(v.toFixed(2), 4, y(v) + 4);
  }
  ctx.fillText("cycle", W - pad - 20, H - 10);
  for (let c = 0; c <= maxCycle; c += 10) ctx.fillText(String(c), x(c) - 4, H - pad + 14);
  curves.forEach((curve, n) => {
    ctx.strokeStyle = COLORS[n % COLORS.length];
    ctx.lineWidth = 2;
    ctx.beginPath();
    let pen = false;
    const start = series === "pass_at_1" ? curve.initial_pass_at_1 : null;
    if (start !== null) {
      ctx.moveTo(x(0), y(start));
      pen = true;
    }
    curve[series].forEach((v, i) => {
      if (v === null) {
        pen = false;
        return;
      }
      if (pen) ctx.lineTo(x(i + 1), y(v));
      else ctx.moveTo(x(i + 1), y(v));
      pen = true;
    });
    ctx.stroke();
    ctx.lineWidth = 1;
  });
  $("legend").innerHTML = curves
    .map((c, n) => {
      const last = c[series].filter((v) => v !== null).at(-1);
      const shown = last === undefined ? "n/a" : last.toFixed(3);
      return `<span style="color:${COLORS[n % COLORS.length]}">&#9632; ${c.preset}: last ${shown}</span>`;
    })
    .join("");
}

async function runCurves() {
  const presets = [...document.querySelectorAll("input[name=preset]:checked")].map((e) => e.value);
  if (presets.length === 0) return status("pick at least one preset");
  status(`training ${presets.join(", ")}...`);
  try {
    const t = performance.now();
    curves = JSON.parse(await later(() => training_curves(presets.join(","), +$("curve-seed").value, +$("curve-cycles").value)));
    status(`trained ${presets.length} run(s) in ${((performance.now() - t) / 1000).toFixed(1)}s`);
    draw();
  } catch (e) {
    status(`error: ${e.message}`);
  }
}

async function runWalk() {
  status("searching for a flagged failure...");
  try {
    const w = JSON.parse(await later(() => redirect_walkthrough(+$("walk-seed").value, +$("walk-k").value)));
    const anchors = w.anchors
      .map((a) => {
        const outs = a.outcomes.map((o) => (o ? '<span class="ok">1</span>' : '<span class="bad">0</span>')).join(" ");
        const critique = a.critique ? ` with critique ${a.critique}` : "";
        return `<div class="anchor ${a.kind}">
          <b>anchor ${a.anchor}: ${a.kind}${critique}</b>, outcomes ${outs}
          <details><summary>redirection prompt</summary><pre>${escape(a.context)}</pre></details>
          <details><summary>rollouts</summary><pre>${a.rollouts.map(escape).join("\n\n")}</pre></details>
        </div>`;
      })
      .join("");
    $("walk").innerHTML = `
      <p>${escape(w.problem)}<br>true values ${w.true_values.join(", ")}; found on query ${w.attempts}</p>
      <p>The starting generator claims ${w.claims.join(", ")}:</p>
      <pre>${escape(w.trajectory)}</pre>
      <p>The starting verifier's reading; the first flagged step is t* = ${w.t_star}:</p>
      <pre>${escape(w.verification)}</pre>
      ${anchors}`;
    status("");
  } catch (e) {
    status(`error: ${e.message}`);
  }
}

function runAdvantages() {
  try {
    const t = JSON.parse(advantages($("adv-rewards").value, +$("adv-eps").value));
    const mean = t.advantages.reduce((a, b) => a + b, 0) / t.advantages.length;
    $("adv").innerHTML = `<table><tr><th>k</th><th>reward</th><th>advantage</th></tr>${t.rewards
      .map((r, k) => `<tr><td>${k + 1}</td><td>${r}</td><td>${t.advantages[k].toFixed(6)}</td></tr>`)
      .join("")}</table><p>mean advantage ${mean.toExponential(2)}</p>`;
    status("");
  } catch (e) {
    status(`error: ${e.message}`);
  }
}

await init();
status("ready");
$("curve-run").onclick = runCurves;
$("curve-series").onchange = draw;
$("walk-run").onclick = runWalk;
$("adv-run").onclick = runAdvantages;
runAdvantages();
draw();
