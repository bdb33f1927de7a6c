import init, { budget_info, simulate, retained_map } from "./pkg/linear_kv_demo.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#eee", "#e66", "#36c", "#8c8"];

function params() {
  return {
    grid: $("grid").value,
    rho: $("rho").value,
    policy: $("policy").value,
    seed: Number($("seed").value) || 0,
  };
}

function showError(el, e) {
  el.innerHTML = `<span class="err">${e.message ?? e}</span>`;
}

function drawSeries(ctx, xs, max, color, box) {
  ctx.strokeStyle = color;
  ctx.beginPath();
  xs.forEach((y, i) => {
    const px = box.x + (i / Math.max(1, xs.length - 1)) * box.w;
    const py = box.y + box.h - (y / max) * box.h;
    i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
  });
  ctx.stroke();
}

function drawCurves(r) {
  const c = $("curves");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const half = c.width / 2;
  const panels = [
    ["visual entries per head", r.head_visual, r.full_head_visual],
    ["attention work per step", r.flops, r.full_flops],
  ];
  panels.forEach(([title, ours, full], k) => {
    const box = { x: k * half + 30, y: 20, w: half - 50, h: c.height - 45 };
    const max = Math.max(...full, 1);
    ctx.fillStyle = "#222";
    ctx.fillText(title, box.x, 12);
    ctx.strokeStyle = "#bbb";
    ctx.strokeRect(box.x, box.y, box.w, box.h);
    drawSeries(ctx, full, max, "#999", box);
    drawSeries(ctx, ours, max, "#c30", box);
    ctx.fillText("step", box.x + box.w - 24, box.y + box.h + 14);
  });
  ctx.fillStyle = "#999";
  ctx.fillText("full cache", 30, c.height - 4);
  ctx.fillStyle = "#c30";
  ctx.fillText(r.policy, 100, c.height - 4);
}

function drawMap() {
  const p = params();
  const line = Number($("line").value);
  $("lineval").textContent = line;
  const c = $("map");
  const ctx = c.getContext("2d");
  let m;
  try {
    m = JSON.parse(retained_map(p.grid, p.rho, p.policy, p.seed, line));
  } catch (e) {
    ctx.clearRect(0, 0, c.width, c.height);
    return;
  }
  const cell = Math.floor(Math.min(c.width / m.w, c.height / m.h));
  ctx.clearRect(0, 0, c.width, c.height);
  m.state.forEach((s, pos) => {
    ctx.fillStyle = COLORS[s];
    ctx.fillRect((pos % m.w) * cell, Math.floor(pos / m.w) * cell, cell - 1, cell - 1);
  });
}

function runAll() {
  const p = params();
  let b;
  try {
    b = JSON.parse(budget_info(p.grid, p.rho));
  } catch (e) {
    showError($("budget"), e);
    return;
  }
  if (!b.ok) {
    $("budget").innerHTML = `<span class="err">${b.error}</span>\nvalid ratios: ${b.valid_rhos.join(", ")}`;
    return;
  }
  $("budget").textContent =
    `N = ${b.n}, B = ${b.budget}, anchors = ${b.n_init}, recent lines = ${b.recent_lines}\n` +
    `first compression at the end of line ${b.first_compression_line ?? "-"}\n` +
    `valid ratios: ${b.valid_rhos.join(", ")}`;
  try {
    const r = JSON.parse(simulate(p.grid, p.rho, p.policy, p.seed));
    $("summary").textContent =
      `eviction events at lines ${r.eviction_lines.join(", ") || "none"}; ` +
      `peak memory saving ${(100 * r.peak_saving).toFixed(1)}%; ` +
      `tokens matching the full cache ${(100 * r.token_agreement).toFixed(1)}%`;
    drawCurves(r);
  } catch (e) {
    showError($("summary"), e);
  }
  const h = Number(p.grid.split("x")[0]) || 1;
  $("line").max = h;
  $("line").value = Math.min(Number($("line").value), h);
  drawMap();
}

await init();
$("go").addEventListener("click", runAll);
$("line").addEventListener("input", drawMap);
runAll();
