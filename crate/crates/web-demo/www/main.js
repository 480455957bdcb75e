// Glue between the static page and the wasm module. Build the module with
//   wasm-pack build crates/web-demo --target web
// then serve this directory and ../pkg from one static server (see README).

import init, { default_config, generate, StepSession, sweep } from "../pkg/syncdiff_web.js";

const $ = (id) => document.getElementById(id);

function drawRgba(canvas, rgba, width, height) {
  canvas.hidden = false;
  canvas.width = width;
  canvas.height = height;
  // Keep the on-screen aspect ratio of the latent grid; CSS scales it up
  // with image-rendering: pixelated.
  canvas.style.aspectRatio = `${width} / ${height}`;
  const ctx = canvas.getContext("2d");
  const image = new ImageData(new Uint8ClampedArray(rgba), width, height);
  ctx.putImageData(image, 0, 0);
}

function setError(id, err) {
  $(id).textContent = err ? String(err) : "";
}

// Let the "working…" label paint before a blocking wasm call.
function afterPaint(fn) {
  requestAnimationFrame(() => setTimeout(fn, 0));
}

const config = () => $("config").value;

// ---- generate -------------------------------------------------------------

function runGenerate() {
  const button = $("generate");
  button.disabled = true;
  $("gen-status").textContent = "working…";
  setError("gen-error", null);
  afterPaint(() => {
    try {
      const pano = generate(config());
      drawRgba($("gen-canvas"), pano.rgba, pano.width, pano.height);
      $("gen-status").textContent =
        `${pano.width}×${pano.height}, ${pano.n_windows} windows, ` +
        `${pano.sync_steps} sync steps, intra metric ${pano.intra_mean.toExponential(3)}`;
      $("gen-trace").textContent = pano.trace_text;
      $("gen-trace-box").hidden = false;
      pano.free();
    } catch (err) {
      $("gen-status").textContent = "";
      setError("gen-error", err);
    } finally {
      button.disabled = false;
    }
  });
}

// ---- step-through session -------------------------------------------------

let session = null;
let playTimer = null;

function stopPlaying() {
  if (playTimer !== null) {
    clearInterval(playTimer);
    playTimer = null;
    $("session-play").textContent = "Play";
  }
}

function renderSession() {
  drawRgba($("session-canvas"), session.preview(), session.width, session.height);
  const where = session.done
    ? `finished after ${session.n_steps} steps`
    : `step ${session.step_index}/${session.n_steps}, next t=${session.current_t}`;
  const intra = session.preview_intra();
  $("session-status").textContent =
    `${where} — weight ${session.weight.toFixed(3)}, ` +
    `preview intra metric ${intra.toExponential(3)}`;
  if (session.done) {
    stopPlaying();
    $("session-step").disabled = true;
    $("session-play").disabled = true;
  }
}

function newSession() {
  stopPlaying();
  setError("session-error", null);
  try {
    if (session) session.free();
    session = new StepSession(config());
    $("session-step").disabled = false;
    $("session-play").disabled = false;
    renderSession();
  } catch (err) {
    session = null;
    $("session-step").disabled = true;
    $("session-play").disabled = true;
    $("session-status").textContent = "";
    setError("session-error", err);
  }
}

function stepSession() {
  if (!session || session.done) return;
  try {
    session.step();
    renderSession();
  } catch (err) {
    stopPlaying();
    setError("session-error", err);
  }
}

function togglePlay() {
  if (playTimer !== null) {
    stopPlaying();
    return;
  }
  $("session-play").textContent = "Pause";
  playTimer = setInterval(stepSession, 150);
}

// ---- sweep ----------------------------------------------------------------

function renderSweep(report) {
  const rows = report.rows;
  const max = Math.max(...rows.map((r) => r.intra_mean), 1e-300);
  const cells = rows
    .map(
      (r) => `<tr>
        <td>${r.w0}</td>
        <td>${r.intra_mean.toExponential(4)}</td>
        <td>±${r.intra_std.toExponential(2)}</td>
        <td style="width:45%"><div class="bar" style="width:${(100 * r.intra_mean) / max}%"></div></td>
      </tr>`
    )
    .join("");
  $("sweep-table").innerHTML = `<table>
    <tr><th>w0</th><th>intra metric (mean)</th><th>std</th><th></th></tr>
    ${cells}
  </table>`;
}

function runSweep() {
  const button = $("sweep-run");
  button.disabled = true;
  $("sweep-status").textContent = "working…";
  setError("sweep-error", null);
  afterPaint(() => {
    try {
      const report = JSON.parse(sweep(config(), $("sweep-w0").value, $("sweep-seeds").value));
      renderSweep(report);
      $("sweep-status").textContent = `seeds ${report.seeds.join(", ")} — lower is more coherent`;
    } catch (err) {
      $("sweep-status").textContent = "";
      setError("sweep-error", err);
    } finally {
      button.disabled = false;
    }
  });
}

// ---- boot -----------------------------------------------------------------

await init();
$("config").value = default_config();
$("generate").addEventListener("click", runGenerate);
$("session-new").addEventListener("click", newSession);
$("session-step").addEventListener("click", stepSession);
$("session-play").addEventListener("click", togglePlay);
$("sweep-run").addEventListener("click", runSweep);
