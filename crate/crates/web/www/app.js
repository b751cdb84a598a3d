import init, { render_galaxies, run_hmc_2d, logit_summary, calibration_demo } from "./pkg/bnn_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function show(id, text, isError = false) {
  $(id).textContent = text;
  $(id).className = isError ? "out err" : "out";
}

function drawImage(canvas, pixels, size) {
  const off = document.createElement("canvas");
  off.width = off.height = size;
  const ctx = off.getContext("2d");
  const img = ctx.createImageData(size, size);
  let lo = Infinity, hi = -Infinity;
  for (const v of pixels) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  for (let i = 0; i < pixels.length; i++) {
    const g = Math.round(255 * (pixels[i] - lo) / (hi - lo || 1));
    img.data.set([g, g, g, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
  const c = canvas.getContext("2d");
  c.imageSmoothingEnabled = false;
  c.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function galaxies() {
  try {
    const size = num("gal-size");
    const pair = render_galaxies(size, num("gal-noise"), num("gal-seed"));
    const images = pair.images;
    drawImage($("gal-0"), images.subarray(0, size * size), size);
    drawImage($("gal-1"), images.subarray(size * size), size);
    const [r0, r1] = pair.ratios;
    show("gal-out", `FRI  peak radius / extent = ${r0.toFixed(3)}\nFRII peak radius / extent = ${r1.toFixed(3)}`);
  } catch (e) {
    show("gal-out", String(e), true);
  }
}

function hmc() {
  try {
    const run = run_hmc_2d($("hmc-target").value, num("hmc-param"), num("hmc-eps"), num("hmc-l"), num("hmc-steps"), num("hmc-seed"));
    const c = $("hmc-canvas").getContext("2d");
    const w = c.canvas.width, h = c.canvas.height, span = 3.5;
    const px = (x) => (x + span) / (2 * span) * w;
    const py = (y) => h - (y + span) / (2 * span) * h;
    c.clearRect(0, 0, w, h);
    c.strokeStyle = "#ddd";
    c.beginPath(); c.moveTo(px(0), 0); c.lineTo(px(0), h); c.moveTo(0, py(0)); c.lineTo(w, py(0)); c.stroke();
    c.fillStyle = "rgba(30, 90, 200, 0.25)";
    const s = run.samples;
    for (let i = 0; i < s.length; i += 2) c.fillRect(px(s[i]) - 1, py(s[i + 1]) - 1, 2, 2);
    const t = run.trajectory;
    c.strokeStyle = "#d33";
    c.beginPath();
    for (let i = 0; i < t.length; i += 2) (i ? c.lineTo : c.moveTo).call(c, px(t[i]), py(t[i + 1]));
    c.stroke();
    let mx = 0, my = 0;
    for (let i = 0; i < s.length; i += 2) { mx += s[i]; my += s[i + 1]; }
    const n = s.length / 2;
    show("hmc-out", `acceptance ${run.acceptance.toFixed(3)}, divergent ${run.divergent}\nmean (${(mx / n).toFixed(3)}, ${(my / n).toFixed(3)})  red: one leapfrog trajectory`);
  } catch (e) {
    show("hmc-out", String(e), true);
  }
}

function logits() {
  try {
    const rows = $("logits").value.trim().split("\n").map((l) => l.split(",").map(Number));
    const k = rows[0].length;
    if (rows.some((r) => r.length !== k || r.some(Number.isNaN))) throw new Error("every line needs the same number of numeric logits");
    const out = logit_summary(new Float64Array(rows.flat()), k);
    const probs = Array.from(out.subarray(3)).map((p) => p.toFixed(3)).join(", ");
    show("logit-out", `average energy      ${out[0].toFixed(4)}\nentropy (nats)      ${out[1].toFixed(4)}\nnormalised entropy  ${out[2].toFixed(4)}\nmean probabilities  ${probs}`);
  } catch (e) {
    show("logit-out", String(e), true);
  }
}

function calibration() {
  try {
    const out = calibration_demo(num("cal-n"), num("cal-over"), 10, 7);
    const c = $("cal-canvas").getContext("2d");
    const w = c.canvas.width, h = c.canvas.height, pad = 24;
    c.clearRect(0, 0, w, h);
    c.strokeStyle = "#999";
    c.beginPath(); c.moveTo(pad, h - pad); c.lineTo(w - pad, pad); c.stroke();
    const bw = (w - 2 * pad) / 10;
    for (let b = 0; b < 10; b++) {
      const [count, err, u] = out.subarray(1 + 3 * b, 4 + 3 * b);
      if (!count) continue;
      c.fillStyle = "rgba(30, 90, 200, 0.6)";
      c.fillRect(pad + b * bw + 2, h - pad - err * (h - 2 * pad), bw - 4, err * (h - 2 * pad));
      c.fillStyle = "#d33";
      c.fillRect(pad + b * bw + 2, h - pad - u * (h - 2 * pad) - 1, bw - 4, 2);
    }
    show("cal-out", `UCE ${out[0].toFixed(2)}%  (bars: bin error rate, red: mean uncertainty)`);
  } catch (e) {
    show("cal-out", String(e), true);
  }
}

await init();
$("gal-go").onclick = galaxies;
$("hmc-go").onclick = hmc;
$("logit-go").onclick = logits;
$("cal-over").oninput = calibration;
$("cal-n").onchange = calibration;
galaxies();
hmc();
logits();
calibration();
