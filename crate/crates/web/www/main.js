// Glue generated by `wasm-bindgen --target web --out-dir www/pkg`.
import init, { advantages, landscape, inflation } from "./pkg/grape_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

const KIND_COLOR = { good: "#2a7", discriminative: "#888", generic: "#d60" };

function show(id, text, isError = false) {
  const el = $(id);
  el.textContent = text;
  el.className = isError ? "err" : "";
}

function guarded(outId, fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      show(outId, String(e.message ?? e), true);
    }
  };
}

// Linear map from [lo, hi] onto [a, b].
function scale(lo, hi, a, b) {
  const span = hi - lo || 1;
  return (v) => a + ((v - lo) / span) * (b - a);
}

function axes(ctx, w, h, pad, xLabel, yLabel) {
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad / 2);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad / 2, h - pad);
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.fillText(xLabel, w / 2, h - 8);
  ctx.save();
  ctx.translate(12, h / 2);
  ctx.rotate(-Math.PI / 2);
  ctx.fillText(yLabel, 0, 0);
  ctx.restore();
}

function drawAdvantages(view) {
  const c = $("adv-canvas");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const k = view.advantages.length;
  const all = view.advantages.concat(view.shifted_advantages);
  const lim = Math.max(1, ...all.map(Math.abs));
  const y = scale(-lim, lim, c.height - 20, 20);
  const slot = (c.width - 40) / Math.max(k, 1);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(20, y(0));
  ctx.lineTo(c.width - 20, y(0));
  ctx.stroke();
  for (let i = 0; i < k; i++) {
    const x0 = 20 + i * slot;
    ctx.fillStyle = "#27c";
    ctx.fillRect(x0 + slot * 0.15, Math.min(y(0), y(view.advantages[i])), slot * 0.3, Math.abs(y(view.advantages[i]) - y(0)));
    ctx.fillStyle = "#d60";
    ctx.fillRect(x0 + slot * 0.5, Math.min(y(0), y(view.shifted_advantages[i])), slot * 0.3, Math.abs(y(view.shifted_advantages[i]) - y(0)));
  }
}

function runAdvantages() {
  const view = JSON.parse(advantages($("adv-rewards").value, num("adv-a"), num("adv-b")));
  drawAdvantages(view);
  const fmt = (xs) => xs.map((x) => x.toFixed(4)).join("  ");
  show(
    "adv-out",
    `mean ${view.mean.toFixed(4)}  std ${view.std.toFixed(4)}\n` +
      `A(r)        ${fmt(view.advantages)}\n` +
      `A(a·r + b)  ${fmt(view.shifted_advantages)}\n` +
      `max |sign(a)·A(r) − A(a·r+b)| = ${view.max_deviation.toExponential(2)}`
  );
}

function runLandscape() {
  const view = JSON.parse(landscape(num("ls-n"), num("ls-dim"), num("ls-q"), num("ls-seed"), num("ls-query")));
  const c = $("ls-canvas");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const pad = 40;
  const sims = view.actions.map((a) => a.similarity);
  const x = scale(Math.min(...sims), Math.max(...sims), pad + 10, c.width - pad);
  const y = scale(-1, 1, c.height - pad, pad / 2);
  axes(ctx, c.width, c.height, pad, "cosine similarity to target", "rank reward");
  for (const a of view.actions) {
    ctx.fillStyle = KIND_COLOR[a.kind];
    ctx.beginPath();
    ctx.arc(x(a.similarity), y(a.rank_reward), 6, 0, 2 * Math.PI);
    ctx.fill();
  }
  const rows = view.actions
    .map((a) => `${a.label.padEnd(12)} ${a.kind.padEnd(15)} sim ${a.similarity.toFixed(3)}  rank ${String(a.rank).padStart(5)}  R ${a.rank_reward.toFixed(3)}`)
    .join("\n");
  const gap = view.gap
    ? `best generic minus good: Δsim ${view.gap.delta_sim.toFixed(3)}, Δrank ${view.gap.delta_rank}`
    : "no good/generic pair for this query";
  show("ls-out", `query ${view.query_id} → target ${view.target_id} of ${view.n}\n${gap}\n\n${rows}`);
}

function drawCurves(canvas, series, yLabel) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pad = 40;
  const all = series.flatMap((s) => s.values);
  const steps = Math.max(...series.map((s) => s.values.length));
  const x = scale(0, Math.max(steps - 1, 1), pad, canvas.width - pad / 2);
  const y = scale(Math.min(...all), Math.max(...all), canvas.height - pad, pad / 2);
  axes(ctx, canvas.width, canvas.height, pad, "step", yLabel);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.values.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
    ctx.stroke();
  }
}

function runInflation() {
  show("inf-out", "training…");
  // Let the status paint before the synchronous run blocks the thread.
  setTimeout(
    guarded("inf-out", () => {
      const t0 = performance.now();
      const view = JSON.parse(
        inflation(num("inf-n"), num("inf-dim"), num("inf-q"), num("inf-seed"), num("inf-steps"), num("inf-lr"))
      );
      drawCurves($("inf-sim"), [
        { values: view.rank.similarity, color: "#27c" },
        { values: view.similarity.similarity, color: "#d60" },
      ], "mean similarity to target");
      drawCurves($("inf-r1"), [
        { values: view.rank.recall_at_1, color: "#27c" },
        { values: view.similarity.recall_at_1, color: "#d60" },
      ], "validation R@1");
      show(
        "inf-out",
        `similarity-trained: similarity slope ${view.sim_mode_sim_slope.toExponential(2)}, ` +
          `validation ΔR@1 ${view.sim_mode_recall_delta.toFixed(3)}\n` +
          `rank-trained: validation ΔR@1 ${view.rank_mode_recall_delta.toFixed(3)}\n` +
          `inflation ${view.reproduced ? "reproduced" : "not reproduced"} ` +
          `(${((performance.now() - t0) / 1000).toFixed(1)}s)`
      );
    }),
    20
  );
}

await init();
$("adv-run").onclick = guarded("adv-out", runAdvantages);
$("ls-run").onclick = guarded("ls-out", runLandscape);
$("inf-run").onclick = runInflation;
guarded("adv-out", runAdvantages)();
guarded("ls-out", runLandscape)();
