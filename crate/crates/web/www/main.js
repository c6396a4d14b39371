import init, { distance_field, dual_unit_ball, wave_snapshot, gallery_names } from "./pkg/subfinsler_web.js";

const $ = (id) => document.getElementById(id);

function heatmap(canvas, values, n) {
  canvas.width = n;
  canvas.height = n;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(n, n);
  const finite = values.filter(Number.isFinite);
  const max = Math.max(...finite, 1e-300);
  for (let row = 0; row < n; row++) {
    for (let col = 0; col < n; col++) {
      const v = values[row * n + col];
      // Flip so that y grows upwards.
      const k = 4 * ((n - 1 - row) * n + col);
      if (!Number.isFinite(v)) {
        img.data.set([0, 0, 0, 255], k);
        continue;
      }
      const s = v / max;
      img.data.set([255 * s, 80 + 120 * (1 - s), 255 * (1 - s), 255], k);
    }
  }
  ctx.putImageData(img, 0, 0);
}

function drawBall(canvas, pts) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width;
  const extent = Math.max(1, ...pts.map(Math.abs)) * 1.1;
  const map = (x) => w / 2 + (x / extent) * (w / 2);
  ctx.clearRect(0, 0, w, w);
  ctx.strokeStyle = "#bbb";
  ctx.beginPath();
  ctx.moveTo(0, w / 2); ctx.lineTo(w, w / 2);
  ctx.moveTo(w / 2, 0); ctx.lineTo(w / 2, w);
  ctx.stroke();
  ctx.strokeStyle = "#c33";
  ctx.lineWidth = 2;
  ctx.beginPath();
  for (let i = 0; i <= pts.length / 2; i++) {
    const j = 2 * (i % (pts.length / 2));
    const x = map(pts[j]);
    const y = w - map(pts[j + 1]);
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  }
  ctx.stroke();
}

function redraw() {
  const name = $("symbol").value;
  const cells = parseInt($("cells").value, 10);
  const t = parseFloat($("t").value);
  $("tval").textContent = t.toFixed(2);
  $("status").textContent = "";
  try {
    heatmap($("dist"), distance_field(name, cells, 2.0, 2), cells + 1);
    drawBall($("ball"), Array.from(dual_unit_ball(name, parseFloat($("px").value), parseFloat($("py").value), 360)));
    heatmap($("wave"), wave_snapshot(name, cells, t, 0.15), cells);
  } catch (e) {
    $("status").textContent = String(e);
  }
}

await init();
for (const name of gallery_names()) {
  $("symbol").add(new Option(name, name));
}
for (const id of ["symbol", "cells", "px", "py", "t"]) {
  $(id).addEventListener("change", redraw);
}
redraw();
