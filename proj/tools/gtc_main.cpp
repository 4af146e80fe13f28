// Command-line front end: train | quantize-pm | eval | bench | grid | inspect.
// Exit codes: 0 success, 2 usage/configuration errors, 1 runtime failures.

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gtc/config.hpp"
#include "gtc/data.hpp"
#include "gtc/io.hpp"
#include "gtc/model.hpp"
#include "gtc/shift.hpp"
#include "gtc/train.hpp"

namespace {

using namespace gtc;

Config make_config(const std::vector<std::string>& files,
                   const std::vector<std::string>& sets) {
  Config cfg;
  for (const std::string& f : files) cfg.apply_file(f);
  for (const std::string& kv : sets) {
    const size_t eq = kv.find('=');
    GTC_CHECK(eq != std::string::npos && eq > 0, ConfigError,
              "--set wants key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

std::vector<Model*> parts_of(BuiltModel* bm) {
  if (bm->is_vae) return bm->vae.parts();
  return {&bm->net};
}

void restore_from_checkpoint(const std::string& path, Config* cfg, BuiltModel* bm) {
  const Checkpoint ck = load_checkpoint(path);
  Config c;
  c.apply_text(ck.config_text, "checkpoint");
  c.validate();
  *bm = build_from_config(c);
  restore_named_tensors(bm, ck.tensors);
  *cfg = std::move(c);
}

// Install a serialized quantized model into a freshly built architecture:
// weights become the exact dequantized powers of two and every layer's
// quantizer is reset to the identity, which maps those values back to the
// same exponents. The zero band is set below the smallest stored magnitude.
void load_gtcq_into(BuiltModel* bm, const std::vector<GtcqEntry>& entries) {
  for (Model* p : parts_of(bm))
    for (const ParamSlot& s : p->slots)
      GTC_CHECK(!s.is_bn, ConfigError,
                "this architecture uses batchnorm, whose additive constants are "
                "not part of the quantized format; evaluate it from its "
                "checkpoint instead");
  std::map<std::string, const GtcqEntry*> by;
  for (const GtcqEntry& e : entries) by[e.name] = &e;
  int32_t min_exp = 0;
  bool any = false;
  for (const GtcqEntry& e : entries)
    if (!e.layer.all_zero) {
      min_exp = any ? std::min(min_exp, e.layer.min_exp) : e.layer.min_exp;
      any = true;
    }
  float eps = any ? std::ldexp(1.0f, std::max(min_exp - 1, -149)) : kDefaultEpsZero;
  if (eps <= 0.0f) eps = 1.4e-45f;
  size_t used = 0;
  for (Model* p : parts_of(bm)) {
    p->eps_zero = eps;
    for (int i : p->quant_slots()) {
      ParamSlot& s = p->slots[size_t(i)];
      const auto take = [&](const std::string& name, Tensor* dst) {
        const auto it = by.find(name);
        GTC_CHECK(it != by.end(), FormatError,
                  "model file is missing entry '" + name + "'");
        const Tensor v = it->second->layer.dequantize();
        GTC_CHECK(v.shape == dst->shape, FormatError,
                  "entry '" + name + "' has shape " + shape_str(v.shape) +
                      ", the architecture expects " + shape_str(dst->shape));
        *dst = v;
        ++used;
      };
      take(s.name, &s.W);
      take(s.name + ".b", &s.b);
      s.theta1.values[0] = 0.0f;
      s.theta2.values[0] = 1.0f;
    }
  }
  GTC_CHECK(used == entries.size(), FormatError,
            "model file holds entries this architecture does not have");
}

double shift_accuracy(const Model& m, const DatasetSplit& d, int64_t eval_batch) {
  const ShiftModel sm = export_shift_model(m);
  OpCounter ctr;
  int64_t correct = 0;
  for (int64_t b = 0; b < d.count(); b += eval_batch) {
    const int64_t n = std::min(eval_batch, d.count() - b);
    const Tensor x = slice_images(d.images, b, n);
    const std::vector<int> pred = argmax_rows(shift_forward(sm, x, &ctr));
    for (int64_t i = 0; i < n; ++i)
      if (pred[size_t(i)] == d.labels[size_t(b + i)]) ++correct;
  }
  return 100.0 * double(correct) / double(d.count());
}

double shift_bce(const VaeModel& m, const DatasetSplit& d, int64_t eval_batch) {
  const ShiftVae sv = export_shift_vae(m);
  OpCounter ctr;
  double sum = 0.0;
  int64_t cnt = 0;
  for (int64_t b = 0; b < d.count(); b += eval_batch) {
    const int64_t n = std::min(eval_batch, d.count() - b);
    const Tensor x = slice_images(d.images, b, n);
    const Tensor r = shift_forward_vae(sv, x, &ctr);
    for (size_t i = 0; i < r.values.size(); ++i) {
      const double p =
          std::min(std::max(double(r.values[i]), 1e-7), 1.0 - 1e-7);
      const double t = double(x.values[i]);
      sum -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    cnt += r.numel();
  }
  return sum / double(cnt);
}

int cmd_train(const std::vector<std::string>& files,
              const std::vector<std::string>& sets, const std::string& resume) {
  const Config cfg = make_config(files, sets);
  const TrainOutput out = run_training(cfg, resume);
  std::cout << summary_to_json(out.summary);
  return 0;
}

int cmd_quantize_pm(const std::string& ckpath, const std::string& out_dir) {
  Config cfg;
  BuiltModel bm;
  restore_from_checkpoint(ckpath, &cfg, &bm);
  for (Model* p : parts_of(&bm))
    for (int i : p->quant_slots()) {
      ParamSlot& s = p->slots[size_t(i)];
      s.theta1.values[0] = 0.0f;
      s.theta2.values[0] = 1.0f;
    }
  DatasetSplit train, test;
  load_datasets(cfg, &train, &test);
  const int64_t eval_batch = std::max<int64_t>(1, cfg.integer("eval_batch"));

  RunSummary s;
  s.mode = "pm";
  s.iters = 0;
  if (bm.is_vae) {
    s.teacher_metric = vae_test_bce(bm.vae, test, false, eval_batch);
    s.student_metric = vae_test_bce(bm.vae, test, true, eval_batch);
  } else {
    s.teacher_metric = classify_accuracy(bm.net, test, false, eval_batch);
    s.student_metric = classify_accuracy(bm.net, test, true, eval_batch);
  }
  const std::vector<LayerRow> rows = layer_rows(bm);
  for (const LayerRow& r : rows) {
    s.layer_names.push_back(r.name);
    s.bits.push_back(r.bits);
    s.theta1.push_back(r.theta1);
    s.theta2.push_back(r.theta2);
  }
  s.avg_bits = avg_bits_plain(rows);
  s.avg_bits_weighted = avg_bits_weighted(rows);
  const std::vector<GtcqEntry> entries = collect_gtcq(bm);
  ensure_dir(out_dir);
  save_gtcq(entries, out_dir + "/model.gtcq");
  const CompressionReport cr = compression_report(entries);
  s.compression_payload = cr.payload_ratio;
  s.compression_file = cr.file_ratio;
  s.config_text = cfg.resolved_text();
  s.config_hash = cfg.hash();
  write_summary_json(s, out_dir + "/summary.json");
  std::cout << summary_to_json(s);
  return 0;
}

int cmd_eval(const std::string& ckpath, const std::string& gtcq_path,
             const std::vector<std::string>& files,
             const std::vector<std::string>& sets, const std::string& engine) {
  GTC_CHECK(ckpath.empty() != gtcq_path.empty(), ConfigError,
            "eval wants exactly one of --checkpoint or --gtcq");
  Config cfg;
  BuiltModel bm;
  bool from_gtcq = false;
  if (!ckpath.empty()) {
    restore_from_checkpoint(ckpath, &cfg, &bm);
  } else {
    GTC_CHECK(!files.empty(), ConfigError,
              "--gtcq needs --config to describe the architecture");
    cfg = make_config(files, sets);
    bm = build_from_config(cfg);
    load_gtcq_into(&bm, load_gtcq(gtcq_path));
    from_gtcq = true;
  }
  DatasetSplit train, test;
  load_datasets(cfg, &train, &test);
  const int64_t eval_batch = std::max<int64_t>(1, cfg.integer("eval_batch"));

  nlohmann::ordered_json j;
  j["engine"] = engine;
  if (bm.is_vae) {
    if (!from_gtcq) j["teacher_bce"] = vae_test_bce(bm.vae, test, false, eval_batch);
    j["student_bce"] = engine == "shift" ? shift_bce(bm.vae, test, eval_batch)
                                         : vae_test_bce(bm.vae, test, true, eval_batch);
  } else {
    if (!from_gtcq)
      j["teacher_acc"] = classify_accuracy(bm.net, test, false, eval_batch);
    j["student_acc"] = engine == "shift"
                           ? shift_accuracy(bm.net, test, eval_batch)
                           : classify_accuracy(bm.net, test, true, eval_batch);
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_bench(const std::string& ckpath, int64_t batch, int repeats) {
  Config cfg;
  BuiltModel bm;
  restore_from_checkpoint(ckpath, &cfg, &bm);
  DatasetSplit train, test;
  load_datasets(cfg, &train, &test);
  const int64_t n = std::min<int64_t>(std::max<int64_t>(batch, 1), test.count());
  const Tensor x = slice_images(test.images, 0, n);
  const BenchReport r = bm.is_vae ? run_bench_vae(bm.vae, x, repeats)
                                  : run_bench(bm.net, x, repeats);
  std::cout << bench_json(r);
  return 0;
}

int cmd_grid(const std::vector<std::string>& files,
             const std::vector<std::string>& sets, const std::string& l1_list,
             const std::string& l2_list) {
  const Config base = make_config(files, sets);
  const auto split_list = [](const std::string& s) {
    std::vector<std::string> out;
    size_t b = 0;
    while (b <= s.size()) {
      const size_t e = s.find(',', b);
      const std::string item =
          s.substr(b, e == std::string::npos ? std::string::npos : e - b);
      GTC_CHECK(!item.empty(), ConfigError, "empty entry in value list");
      out.push_back(item);
      if (e == std::string::npos) break;
      b = e + 1;
    }
    return out;
  };
  const std::vector<std::string> l1s = split_list(l1_list);
  const std::vector<std::string> l2s = split_list(l2_list);
  const std::string base_out = base.str("out_dir");
  ensure_dir(base_out);

  struct Cell {
    Config cfg;
    std::string l1, l2;
    RunSummary summary;
    std::string error;
  };
  std::vector<Cell> cells;
  for (const std::string& l1 : l1s)
    for (const std::string& l2 : l2s) {
      Cell c;
      c.cfg = base;
      c.l1 = l1;
      c.l2 = l2;
      c.cfg.set("lambda1", l1);
      c.cfg.set("lambda2", l2);
      c.cfg.set("out_dir", base_out + "/cell-l1_" + l1 + "-l2_" + l2);
      c.cfg.validate();
      cells.push_back(std::move(c));
    }

  size_t workers = std::thread::hardware_concurrency();
  if (const char* env = std::getenv("GTC_THREADS"); env != nullptr && env[0]) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) workers = size_t(v);
  }
  workers = std::max<size_t>(1, std::min(workers, cells.size()));

  std::atomic<size_t> next{0};
  const auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        cells[i].summary = run_training(cells[i].cfg).summary;
      } catch (const std::exception& e) {
        cells[i].error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (size_t i = 0; i < workers; ++i) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  bool failed = false;
  std::string csv =
      "lambda1,lambda2,teacher_metric,student_metric,avg_bits,avg_bits_weighted,"
      "compression_payload\n";
  for (const Cell& c : cells) {
    if (!c.error.empty()) {
      failed = true;
      std::cerr << "cell lambda1=" << c.l1 << " lambda2=" << c.l2
                << " failed: " << c.error << "\n";
      continue;
    }
    csv += c.l1 + "," + c.l2 + "," + format_number(c.summary.teacher_metric) + "," +
           format_number(c.summary.student_metric) + "," +
           format_number(c.summary.avg_bits) + "," +
           format_number(c.summary.avg_bits_weighted) + "," +
           format_number(c.summary.compression_payload) + "\n";
  }
  if (!failed) write_file_atomic(base_out + "/grid.csv", csv);
  std::cout << csv;
  return failed ? 1 : 0;
}

int cmd_inspect(const std::string& path, int64_t limit) {
  const std::vector<GtcqEntry> entries = load_gtcq(path);
  for (const GtcqEntry& e : entries) {
    const QuantizedLayer& q = e.layer;
    int64_t zeros = 0;
    for (int8_t s : q.sign) zeros += s == 0;
    std::cout << e.name << "  shape=" << shape_str(q.shape)
              << "  theta1=" << format_number(double(e.theta1))
              << "  theta2=" << format_number(double(e.theta2));
    if (q.all_zero) {
      std::cout << "  all-zero  bits=" << q.bits << "\n";
    } else {
      std::cout << "  exp=[" << q.min_exp << "," << q.max_exp << "]"
                << "  bits=" << q.bits << "  code_width=" << code_width(q)
                << "  zeros=" << zeros << "/" << q.numel() << "\n";
    }
    if (q.numel() <= limit) {
      for (int64_t i = 0; i < q.numel(); ++i) {
        if (q.sign[size_t(i)] == 0) {
          std::cout << "    [" << i << "] ∅\n";  // zero weight
          continue;
        }
        const int32_t k = q.exponent[size_t(i)];
        std::cout << "    [" << i << "] "
                  << (q.sign[size_t(i)] < 0 ? "¬" : " ")  // sign flip
                  << (k >= 0 ? "<<" : ">>") << (k >= 0 ? k : -k) << "\n";
      }
    }
  }
  const CompressionReport cr = compression_report(entries);
  std::cout << "params=" << cr.param_count << " payload_bytes=" << cr.payload_bytes
            << " file_bytes=" << cr.file_bytes
            << " payload_ratio=" << format_number(cr.payload_ratio)
            << " file_ratio=" << format_number(cr.file_ratio) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"power-of-two quantized training and shift-based inference"};
  app.require_subcommand(1);

  std::vector<std::string> files, sets;
  std::string resume, ckpath, gtcq_path, out_dir, engine = "float";
  std::string l1_list, l2_list;
  int64_t batch = 64, limit = 16;
  int repeats = 10;

  CLI::App* train = app.add_subcommand("train", "train per configuration");
  train->add_option("--config", files, "configuration file(s), applied in order")
      ->check(CLI::ExistingFile);
  train->add_option("--set", sets, "override keys, key=value");
  train->add_option("--resume", resume, "checkpoint to continue from")
      ->check(CLI::ExistingFile);

  CLI::App* pm = app.add_subcommand(
      "quantize-pm", "baseline power-of-two quantization of a trained checkpoint");
  pm->add_option("--checkpoint", ckpath, "trained checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  pm->add_option("--out", out_dir, "output directory")->required();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint or model file");
  ev->add_option("--checkpoint", ckpath, "checkpoint to evaluate")
      ->check(CLI::ExistingFile);
  ev->add_option("--gtcq", gtcq_path, "quantized model to evaluate")
      ->check(CLI::ExistingFile);
  ev->add_option("--config", files, "architecture/dataset configuration (with --gtcq)")
      ->check(CLI::ExistingFile);
  ev->add_option("--set", sets, "override keys, key=value");
  ev->add_option("--engine", engine, "student evaluation engine: float|shift")
      ->check(CLI::IsMember({"float", "shift"}));

  CLI::App* be = app.add_subcommand("bench", "compare the shift engine to float");
  be->add_option("--checkpoint", ckpath, "trained checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  be->add_option("--batch", batch, "bench batch size");
  be->add_option("--repeats", repeats, "timed passes");

  CLI::App* gr = app.add_subcommand("grid", "lambda1 x lambda2 sweep");
  gr->add_option("--config", files, "configuration file(s)")
      ->check(CLI::ExistingFile);
  gr->add_option("--set", sets, "override keys, key=value");
  gr->add_option("--lambda1", l1_list, "comma-separated lambda1 values")->required();
  gr->add_option("--lambda2", l2_list, "comma-separated lambda2 values")->required();

  CLI::App* in = app.add_subcommand("inspect", "print a quantized model file");
  in->add_option("--gtcq", gtcq_path, "model file")
      ->required()
      ->check(CLI::ExistingFile);
  in->add_option("--limit", limit, "list weights for tensors up to this size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
        e.get_name() == "CallForVersion")
      return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(files, sets, resume);
    if (pm->parsed()) return cmd_quantize_pm(ckpath, out_dir);
    if (ev->parsed()) return cmd_eval(ckpath, gtcq_path, files, sets, engine);
    if (be->parsed()) return cmd_bench(ckpath, batch, repeats);
    if (gr->parsed()) return cmd_grid(files, sets, l1_list, l2_list);
    if (in->parsed()) return cmd_inspect(gtcq_path, limit);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
