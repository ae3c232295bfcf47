import init, { Demo } from "./pkg/snapdiff_demo.js";

const $ = (id) => document.getElementById(id);
let demo = null;

const BASE = `the committee met on monday and approved the budget .
the report was published in the spring .
members of the committee discussed the new policy .
the budget for the next year was approved .
the policy was discussed at length by the members .
the new report describes the budget in detail .
on monday the members published the report .`;

const UPDATE = `the committee met again on friday .
nurses nervously trusted incompetent graduates
the members approved the report on friday .
nurses nervously trusted incompetent graduates
the new budget was discussed on friday .
nurses nervously trusted incompetent graduates`;

function setStatus(text, isError = false) {
  $("status").textContent = text;
  $("status").className = isError ? "status error" : "status";
}

function fmt(x) {
  return Number(x).toPrecision(4);
}

function bar(x, scale) {
  const w = Math.min(100, Math.abs(x) * scale);
  return `<span class="bar${x < 0 ? " neg" : ""}" style="width:${w}px"></span>`;
}

function escape(s) {
  return s.replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c]);
}

function train() {
  try {
    demo = new Demo($("base").value, $("update").value, +$("order").value, +$("vocab").value, +$("addk").value);
    setStatus(`trained, |T| = ${demo.vocabSize()}`);
    $("score").disabled = false;
    $("extract").disabled = false;
  } catch (e) {
    demo = null;
    setStatus(String(e.message ?? e), true);
  }
}

function score() {
  try {
    const r = JSON.parse(demo.score($("phrase").value));
    const rows = r.tokens
      .map((t, i) => `<tr><td>${escape(t)}</td><td class="num">${fmt(r.per_token[i])}</td><td>${bar(r.per_token[i], 100)}</td></tr>`)
      .join("");
    $("scoreOut").innerHTML =
      `<p>DS = <b>${fmt(r.ds)}</b>, relative DS = <b>${fmt(r.ds_rel)}</b></p>` +
      `<table><tr><th>token</th><th>M′ − M given prefix</th><th></th></tr>${rows}</table>`;
  } catch (e) {
    $("scoreOut").innerHTML = `<p class="error">${escape(String(e.message ?? e))}</p>`;
  }
}

function extract() {
  try {
    const groups = JSON.parse(
      demo.extract(+$("length").value, +$("groups").value, +$("top").value, +$("trunc").value, $("relative").checked),
    );
    $("extractOut").innerHTML = groups
      .map((g) => {
        const rows = g.phrases
          .map((p, i) => `<tr><td>${i}</td><td>${escape(p.text)}</td><td class="num">${fmt(p.score)}</td></tr>`)
          .join("");
        return `<h3>group ${g.group}</h3><table><tr><th>#</th><th>phrase</th><th>score</th></tr>${rows}</table>`;
      })
      .join("");
  } catch (e) {
    $("extractOut").innerHTML = `<p class="error">${escape(String(e.message ?? e))}</p>`;
  }
}

$("base").value = BASE;
$("update").value = UPDATE;
$("train").onclick = train;
$("score").onclick = score;
$("extract").onclick = extract;

init().then(() => {
  setStatus("ready");
  train();
});
