import init, {
  stain_demo, stain_pixels, tile_demo, tile_pixels, attention_demo,
} from "./pkg/plexus_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function paint(canvas, bytes, w, h, offset = 0) {
  canvas.width = w;
  canvas.height = h;
  const img = new ImageData(new Uint8ClampedArray(bytes.buffer, bytes.byteOffset + offset, w * h * 4), w, h);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function guard(out, f) {
  try {
    out.classList.remove("err");
    f();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e);
  }
}

function runStain() {
  const seed = num("st-seed"), shift = num("st-shift"), size = 192;
  $("st-shift-v").textContent = shift.toFixed(2);
  guard($("st-out"), () => {
    const report = JSON.parse(stain_demo(seed, shift, size));
    const px = stain_pixels(seed, shift, size);
    paint($("st-orig"), px, size, size);
    paint($("st-norm"), px, size, size, size * size * 4);
    const f = (v) => v.map((x) => x.toFixed(3)).join(", ");
    $("st-out").textContent =
      `true H   [${f(report.true_stains[0])}]   fitted [${f(report.fitted_stains[0])}]   error ${report.angle_error_deg[0].toFixed(2)} deg\n` +
      `true E   [${f(report.true_stains[1])}]   fitted [${f(report.fitted_stains[1])}]   error ${report.angle_error_deg[1].toFixed(2)} deg\n` +
      `left: rendered, right: normalized to the reference`;
  });
}

function runTile() {
  const seed = num("ti-seed"), side = 448;
  guard($("ti-out"), () => {
    const report = JSON.parse(tile_demo(seed, side, num("ti-size"), num("ti-stride")));
    const canvas = $("ti-canvas");
    paint(canvas, tile_pixels(seed, side), side, side);
    const ctx = canvas.getContext("2d");
    let pos = 0;
    for (const t of report.tiles) {
      ctx.strokeStyle = t.plexus ? "rgba(220,0,0,0.9)" : "rgba(0,0,0,0.25)";
      ctx.lineWidth = t.plexus ? 2 : 1;
      ctx.strokeRect(t.x + 0.5, t.y + 0.5, report.tile - 1, report.tile - 1);
      pos += t.plexus ? 1 : 0;
    }
    $("ti-out").textContent = `${report.tiles.length} tiles, ${pos} plexus, ${report.tiles.length - pos} no plexus`;
  });
}

function runAttention() {
  const sep = num("at-sep");
  $("at-sep-v").textContent = sep.toFixed(2);
  guard($("at-out"), () => {
    const r = JSON.parse(attention_demo(sep, num("at-seed"), num("at-epochs")));
    const table = document.createElement("table");
    table.className = "att";
    const head = table.insertRow();
    head.insertCell().className = "name";
    r.evidence.forEach((ev, i) => {
      const th = document.createElement("th");
      th.textContent = i;
      if (ev) th.className = "ev";
      head.appendChild(th);
    });
    r.attention.forEach((row, j) => {
      const tr = table.insertRow();
      const name = tr.insertCell();
      name.className = "name";
      name.textContent = r.concepts[j];
      const peak = Math.max(...row);
      for (const a of row) {
        const td = tr.insertCell();
        const shade = Math.round(255 * (1 - a / peak));
        td.style.background = `rgb(${shade},${shade},255)`;
        td.title = a.toFixed(4);
      }
    });
    $("at-table").replaceChildren(table);
    $("at-out").textContent =
      `held-out bag label: ${r.label}, predicted plexus probability ${r.plexus_probability.toFixed(3)}, ` +
      `best validation accuracy ${r.val_accuracy.toFixed(3)}`;
  });
}

await init();
$("st-run").onclick = runStain;
$("st-shift").oninput = runStain;
$("ti-run").onclick = runTile;
$("at-run").onclick = runAttention;
$("at-sep").oninput = () => ($("at-sep-v").textContent = num("at-sep").toFixed(2));
runStain();
runTile();
runAttention();
