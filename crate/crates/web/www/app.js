// Expects the wasm-bindgen output (target web) in ./pkg.
import init, { preset_names, trial_profile, variance_inflation_curve, mini_study } from "./pkg/rdmi_web.js";

const $ = (id) => document.getElementById(id);

function fail(el, e) {
  el.innerHTML = `<p class="err">${String(e)}</p>`;
}

function fillPresets(select, names, initial) {
  for (const n of names) {
    const opt = document.createElement("option");
    opt.value = opt.textContent = n;
    select.appendChild(opt);
  }
  select.value = initial;
}

function table(headers, rows) {
  const head = headers.map((h) => `<th>${h}</th>`).join("");
  const body = rows.map((r) => `<tr>${r.map((c) => `<td>${c}</td>`).join("")}</tr>`).join("");
  return `<table><tr>${head}</tr>${body}</table>`;
}

const fmt = (x, d = 2) => (x === null || x === undefined ? "-" : x.toFixed(d));

// Stacked bars per arm and visit: on treatment, retrieved, missing.
function drawProfile(canvas, arms) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const colours = ["#4a7ab5", "#e0a030", "#c0c0c0"];
  const barW = 60, gap = 20, top = 20, h = canvas.height - 50;
  let x = 40;
  for (const arm of arms) {
    for (const v of arm.visits) {
      const parts = [v.on_treatment, v.retrieved, v.missing];
      const total = parts.reduce((a, b) => a + b, 0);
      let y = top + h;
      parts.forEach((p, i) => {
        const ph = (h * p) / total;
        ctx.fillStyle = colours[i];
        ctx.fillRect(x, y - ph, barW, ph);
        y -= ph;
      });
      ctx.fillStyle = "#222";
      ctx.fillText(`${arm.arm} ${v.visit}`, x + 5, top + h + 15);
      x += barW + gap;
    }
    x += 2 * gap;
  }
  ["on treatment", "retrieved", "missing"].forEach((label, i) => {
    ctx.fillStyle = colours[i];
    ctx.fillRect(x, top + 20 * i, 12, 12);
    ctx.fillStyle = "#222";
    ctx.fillText(label, x + 18, top + 10 + 20 * i);
  });
}

function drawCurve(canvas, pts) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const l = 50, b = canvas.height - 30, w = canvas.width - 80, h = canvas.height - 50;
  const ymax = Math.max(...pts.map((p) => p.relative_increase)) || 1;
  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.moveTo(l, b - h);
  ctx.lineTo(l, b);
  ctx.lineTo(l + w, b);
  ctx.stroke();
  ctx.fillStyle = "#222";
  ctx.fillText("share of IE patients missing", l + w / 2 - 60, b + 20);
  ctx.fillText(ymax.toFixed(2), 5, b - h + 4);
  ctx.fillText("0", 30, b + 4);
  ctx.strokeStyle = "#4a7ab5";
  ctx.beginPath();
  pts.forEach((p, i) => {
    const x = l + w * p.missing_share;
    const y = b - (h * p.relative_increase) / ymax;
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

function showProfile() {
  const out = $("profile-table");
  try {
    const arms = JSON.parse(trial_profile($("profile-preset").value, Number($("profile-rep").value)));
    drawProfile($("profile-canvas"), arms);
    const rows = arms.flatMap((a) =>
      a.visits.map((v) => [a.arm, v.visit, v.on_treatment, v.retrieved, v.missing, fmt(v.observed_response_pct, 1)]));
    out.innerHTML = table(["arm", "visit", "on treatment", "retrieved", "missing", "response %"], rows);
  } catch (e) {
    fail(out, e);
  }
}

function showCurve() {
  try {
    const pts = JSON.parse(variance_inflation_curve(
      Number($("vi-n").value), Number($("vi-ie").value), Number($("vi-p1").value), Number($("vi-p2").value), 100));
    drawCurve($("vi-canvas"), pts);
  } catch (e) {
    const ctx = $("vi-canvas").getContext("2d");
    ctx.clearRect(0, 0, 900, 260);
    ctx.fillStyle = "#b00";
    ctx.fillText(String(e), 20, 30);
  }
}

function runStudy() {
  const out = $("study-out");
  out.textContent = "running...";
  // Let the browser paint before the synchronous run.
  setTimeout(() => {
    try {
      const r = JSON.parse(mini_study($("study-preset").value, Number($("study-sims").value), Number($("study-m").value)));
      const rows = r.rows.map((m) => [m.model, fmt(m.fitted_pct, 1), fmt(m.mean_estimate, 3), fmt(m.bias_pct, 1),
        fmt(m.empirical_se, 3), fmt(m.mean_model_se, 3), fmt(m.coverage_pct, 1)]);
      out.innerHTML = `<p>true log odds ratio ${r.theta_true.toFixed(4)}</p>` +
        table(["model", "fitted %", "estimate", "bias %", "empirical SE", "model SE", "coverage %"], rows);
    } catch (e) {
      fail(out, e);
    }
  }, 10);
}

await init();
const names = JSON.parse(preset_names()).filter((n) => !n.includes("-n"));
fillPresets($("profile-preset"), names, "base-disc30a20c-w70");
fillPresets($("study-preset"), names, "base-disc30a20c-w50");
$("profile-go").onclick = showProfile;
$("vi-go").onclick = showCurve;
$("study-go").onclick = runStudy;
showProfile();
showCurve();
