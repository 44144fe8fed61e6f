#include "dcrl/experiment.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dcrl/serialize.hpp"

namespace dcrl::harness {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

void require_keys(const json& j, const std::set<std::string>& allowed,
                  const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (allowed.count(it.key()) == 0)
      throw ConfigError("unknown config key '" + it.key() + "' in " + where);
  }
}

template <typename T>
T get_as(const json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

json train_to_json(const trainer::TrainConfig& t) {
  json j = json::parse(t.to_json_string());
  // Per-cell fields are not part of the experiment schema.
  j.erase("d");
  j.erase("seed");
  return j;
}

trainer::TrainConfig train_from_json(const json& j) {
  trainer::TrainConfig base;
  json full = json::parse(base.to_json_string());
  require_keys(j, [&] {
    std::set<std::string> keys;
    for (auto it = full.begin(); it != full.end(); ++it) keys.insert(it.key());
    keys.erase("d");
    keys.erase("seed");
    return keys;
  }(), "train");
  for (auto it = j.begin(); it != j.end(); ++it) full[it.key()] = *it;
  return trainer::TrainConfig::from_json_string(full.dump());
}

struct MetricRecord {
  std::string mode, adapter;
  int d = 0;
  std::uint64_t seed = 0;
  double t = -1.0;
  double shd = 0.0, dci_d = 0.0, dci_c = 0.0, accuracy = 0.0;
};

std::vector<MetricRecord> read_metrics(const ExperimentConfig& cfg) {
  std::vector<MetricRecord> out;
  for (int d : cfg.d_values) {
    for (std::uint64_t seed : cfg.seeds) {
      const std::string path = cfg.cell_dir(d, seed) + "/metrics.jsonl";
      std::ifstream in(path);
      if (!in) continue;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json rec = json::parse(line);
        MetricRecord m;
        m.mode = rec.at("mode").get<std::string>();
        m.adapter = rec.at("adapter").get<std::string>();
        m.d = rec.at("d").get<int>();
        m.seed = rec.at("seed").get<std::uint64_t>();
        m.t = rec.at("t").is_null() ? -1.0 : rec.at("t").get<double>();
        m.shd = rec.at("shd").get<double>();
        m.dci_d = rec.at("dci_d").get<double>();
        m.dci_c = rec.at("dci_c").get<double>();
        m.accuracy = rec.at("accuracy").get<double>();
        out.push_back(std::move(m));
      }
    }
  }
  return out;
}

struct Stat {
  double mean = 0.0, stddev = 0.0;
  int count = 0;
};

Stat mean_std(const std::vector<double>& v) {
  Stat s;
  s.count = static_cast<int>(v.size());
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double acc = 0.0;
  for (double x : v) acc += (x - s.mean) * (x - s.mean);
  // Std over seeds (population form for a complete seed set).
  s.stddev = std::sqrt(acc / v.size());
  return s;
}

// Minimal SVG emission: grouped bars with error whiskers, and polylines.
class SvgCanvas {
 public:
  SvgCanvas(int w, int h) : w_(w), h_(h) {
    body_ << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w
          << "' height='" << h << "' viewBox='0 0 " << w << " " << h << "'>\n"
          << "<rect width='100%' height='100%' fill='white'/>\n";
  }
  void line(double x1, double y1, double x2, double y2,
            const std::string& color = "#333", double width = 1.0) {
    body_ << "<line x1='" << x1 << "' y1='" << y1 << "' x2='" << x2 << "' y2='"
          << y2 << "' stroke='" << color << "' stroke-width='" << width
          << "'/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ << "<rect x='" << x << "' y='" << y << "' width='" << w
          << "' height='" << h << "' fill='" << fill << "'/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 12,
            const std::string& anchor = "middle") {
    body_ << "<text x='" << x << "' y='" << y << "' font-size='" << size
          << "' font-family='sans-serif' text-anchor='" << anchor << "'>" << s
          << "</text>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& color) {
    body_ << "<polyline fill='none' stroke='" << color
          << "' stroke-width='2' points='";
    for (const auto& [x, y] : pts) body_ << x << "," << y << " ";
    body_ << "'/>\n";
  }
  void save(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    out << body_.str() << "</svg>\n";
  }

 private:
  int w_, h_;
  std::ostringstream body_;
};

const std::vector<std::string> kPalette = {"#4472c4", "#ed7d31", "#70ad47",
                                           "#b34a9c"};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

void bar_plot(const std::string& path, const std::string& metric,
              const std::vector<int>& ds,
              const std::vector<std::string>& adapters,
              const std::map<std::pair<int, std::string>, Stat>& stats) {
  const int width = 640, height = 400;
  SvgCanvas svg(width, height);
  const double x0 = 60, y0 = 340, x1 = 600, y1 = 40;
  double vmax = 1e-9;
  for (const auto& [k, s] : stats) vmax = std::max(vmax, s.mean + s.stddev);
  vmax *= 1.1;
  svg.line(x0, y0, x1, y0);
  svg.line(x0, y0, x0, y1);
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = vmax * tick / 4.0;
    const double y = y0 - (y0 - y1) * tick / 4.0;
    svg.line(x0 - 4, y, x0, y);
    svg.text(x0 - 8, y + 4, fmt(v), 11, "end");
  }
  const double group_w = (x1 - x0) / ds.size();
  const double bar_w = group_w * 0.8 / std::max<std::size_t>(adapters.size(), 1);
  for (std::size_t gi = 0; gi < ds.size(); ++gi) {
    const double gx = x0 + gi * group_w + group_w * 0.1;
    for (std::size_t ai = 0; ai < adapters.size(); ++ai) {
      const auto it = stats.find({ds[gi], adapters[ai]});
      if (it == stats.end()) continue;
      const double h = (it->second.mean / vmax) * (y0 - y1);
      const double bx = gx + ai * bar_w;
      svg.rect(bx, y0 - h, bar_w * 0.9, h, kPalette[ai % kPalette.size()]);
      const double err = (it->second.stddev / vmax) * (y0 - y1);
      if (err > 0) {
        const double cx = bx + bar_w * 0.45;
        svg.line(cx, y0 - h - err, cx, y0 - h + err, "#222");
      }
    }
    svg.text(gx + group_w * 0.4, y0 + 18, "d=" + std::to_string(ds[gi]));
  }
  for (std::size_t ai = 0; ai < adapters.size(); ++ai) {
    svg.rect(x0 + ai * 130.0, 10, 12, 12, kPalette[ai % kPalette.size()]);
    svg.text(x0 + ai * 130.0 + 18, 20, adapters[ai], 12, "start");
  }
  svg.text((x0 + x1) / 2, height - 12, metric + " (mean +/- std over seeds)");
  svg.save(path);
}

void line_plot(const std::string& path, const std::string& metric, int d,
               const std::vector<std::string>& adapters,
               const std::map<std::pair<double, std::string>, Stat>& stats) {
  const int width = 640, height = 400;
  SvgCanvas svg(width, height);
  const double x0 = 60, y0 = 340, x1 = 600, y1 = 40;
  double vmax = 1e-9;
  for (const auto& [k, s] : stats) vmax = std::max(vmax, s.mean + s.stddev);
  vmax *= 1.1;
  svg.line(x0, y0, x1, y0);
  svg.line(x0, y0, x0, y1);
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = vmax * tick / 4.0;
    const double y = y0 - (y0 - y1) * tick / 4.0;
    svg.line(x0 - 4, y, x0, y);
    svg.text(x0 - 8, y + 4, fmt(v), 11, "end");
  }
  for (int i = 0; i <= 10; ++i) {
    const double x = x0 + (x1 - x0) * i / 10.0;
    svg.line(x, y0, x, y0 + 4);
    svg.text(x, y0 + 18, fmt(i / 10.0), 10);
  }
  for (std::size_t ai = 0; ai < adapters.size(); ++ai) {
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i <= 10; ++i) {
      const auto it = stats.find({i / 10.0, adapters[ai]});
      if (it == stats.end()) continue;
      pts.push_back({x0 + (x1 - x0) * i / 10.0,
                     y0 - (it->second.mean / vmax) * (y0 - y1)});
    }
    if (!pts.empty()) svg.polyline(pts, kPalette[ai % kPalette.size()]);
    svg.rect(x0 + ai * 130.0, 10, 12, 12, kPalette[ai % kPalette.size()]);
    svg.text(x0 + ai * 130.0 + 18, 20, adapters[ai], 12, "start");
  }
  svg.text((x0 + x1) / 2, height - 12,
           metric + " over trajectory time, d=" + std::to_string(d));
  svg.save(path);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  require_keys(j,
               {"name", "d_values", "seeds", "edge_prob", "n_train", "n_val",
                "n_test", "train", "eval_modes", "adapters", "out_dir"},
               "experiment config");
  ExperimentConfig c;
  c.name = get_as<std::string>(j, "name", c.name);
  c.d_values = get_as<std::vector<int>>(j, "d_values", c.d_values);
  c.seeds = get_as<std::vector<std::uint64_t>>(j, "seeds", c.seeds);
  c.edge_prob = get_as<double>(j, "edge_prob", c.edge_prob);
  c.n_train = get_as<int>(j, "n_train", c.n_train);
  c.n_val = get_as<int>(j, "n_val", c.n_val);
  c.n_test = get_as<int>(j, "n_test", c.n_test);
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  c.eval_modes = get_as<std::vector<std::string>>(j, "eval_modes", c.eval_modes);
  c.adapters = get_as<std::vector<std::string>>(j, "adapters", c.adapters);
  c.out_dir = get_as<std::string>(j, "out_dir", c.out_dir);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

ExperimentConfig ExperimentConfig::profile(const std::string& name) {
  ExperimentConfig c;
  if (name == "full") {
    c.name = "full";
    c.d_values = {5, 10, 15};
    c.seeds = {0, 1, 2, 3};
    c.n_train = 100000;
    c.n_val = 10000;
    c.n_test = 10000;
    c.train.phase_epochs = {20, 50, 50};
    c.out_dir = "runs/full";
  } else if (name == "desk") {
    c.name = "desk";
    c.d_values = {5};
    c.seeds = {0, 1};
    c.n_train = 20000;
    c.n_val = 2000;
    c.n_test = 5000;
    c.train.phase_epochs = {5, 10, 10};
    // A narrower score net trains further within the short desk schedule
    // and leans harder on the conditioning channel.
    c.train.score_width = 64;
    c.train.score_blocks = 1;
    c.out_dir = "runs/desk";
  } else {
    throw ConfigError("unknown profile '" + name + "' (try: full, desk)");
  }
  return c;
}

json ExperimentConfig::to_json() const {
  return json{{"name", name},
              {"d_values", d_values},
              {"seeds", seeds},
              {"edge_prob", edge_prob},
              {"n_train", n_train},
              {"n_val", n_val},
              {"n_test", n_test},
              {"train", train_to_json(train)},
              {"eval_modes", eval_modes},
              {"adapters", adapters},
              {"out_dir", out_dir}};
}

std::string ExperimentConfig::hash() const {
  const std::string canon = to_json().dump();
  return io::hex64(io::fnv1a(canon.data(), canon.size()));
}

void ExperimentConfig::validate() const {
  if (d_values.empty()) throw ConfigError("d_values must be nonempty");
  for (int d : d_values)
    if (d < 1) throw ConfigError("d_values entries must be >= 1");
  if (seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (edge_prob < 0.0 || edge_prob > 1.0)
    throw ConfigError("edge_prob must lie in [0,1]");
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw ConfigError("split sizes must be >= 1");
  for (const auto& m : eval_modes)
    if (m != "single" && m != "trajectory")
      throw ConfigError("eval_modes entries must be 'single' or 'trajectory'");
  for (const auto& a : adapters)
    if (a != "model" && a != "random" && a != "oracle")
      throw ConfigError("adapters entries must be model|random|oracle");
  try {
    trainer::TrainConfig t = train;
    t.d = d_values[0];
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train config invalid: ") + e.what());
  }
}

std::string ExperimentConfig::resolved_out_dir() const {
  fs::path p(out_dir);
  if (p.is_absolute()) return p.string();
  const char* root = std::getenv("DCRL_OUT_ROOT");
  if (root != nullptr && *root != '\0') return (fs::path(root) / p).string();
  return p.string();
}

std::string ExperimentConfig::cell_dir(int d, std::uint64_t seed) const {
  return resolved_out_dir() + "/d" + std::to_string(d) + "_s" +
         std::to_string(seed);
}

CellOutcome run_cell(const ExperimentConfig& cfg, int d, std::uint64_t seed,
                     std::ostream& log) {
  CellOutcome out;
  out.d = d;
  out.seed = seed;
  out.dir = cfg.cell_dir(d, seed);
  const std::string record_path = out.dir + "/run_record.json";
  const std::string dataset_path = out.dir + "/dataset.bin";
  const std::string metrics_path = out.dir + "/metrics.jsonl";

  try {
    if (fs::exists(record_path)) {
      std::ifstream in(record_path);
      json rec = json::parse(in);
      if (rec.value("config_hash", "") == cfg.hash() &&
          fs::exists(dataset_path) && fs::exists(metrics_path)) {
        out.ok = true;
        out.skipped = true;
        log << "[cell d=" << d << " seed=" << seed << "] cached, skipping\n";
        return out;
      }
    }
    fs::create_directories(out.dir);
    const auto t0 = std::chrono::steady_clock::now();

    log << "[cell d=" << d << " seed=" << seed << "] generating dataset\n";
    scmgen::PairDataset ds = scmgen::build_dataset(
        d, cfg.edge_prob, cfg.n_train, cfg.n_val, cfg.n_test, seed);
    scmgen::save_dataset(ds, dataset_path);

    trainer::TrainConfig tc = cfg.train;
    tc.d = d;
    tc.seed = seed;
    const bool needs_model =
        std::find(cfg.adapters.begin(), cfg.adapters.end(), "model") !=
        cfg.adapters.end();
    std::string checkpoint_path;
    if (needs_model) {
      log << "[cell d=" << d << " seed=" << seed << "] training\n";
      trainer::TrainResult tr = trainer::train(ds, tc, out.dir);
      checkpoint_path = tr.checkpoint_path;
    }

    log << "[cell d=" << d << " seed=" << seed << "] evaluating\n";
    std::ofstream metrics(metrics_path, std::ios::trunc);
    evalx::EvalConfig ec;
    for (const std::string& adapter : cfg.adapters) {
      if (adapter == "oracle") {
        metrics << evalx::evaluate_oracle(ds, ec).to_jsonl();
        continue;
      }
      if (adapter == "random") {
        metrics << evalx::evaluate_random(ds, seed + 1000003, ec).to_jsonl();
        continue;
      }
      trainer::Checkpoint ck = trainer::load_checkpoint(checkpoint_path);
      for (const std::string& mode : cfg.eval_modes) {
        const auto m = mode == "single" ? evalx::EvalMode::kSingle
                                        : evalx::EvalMode::kTrajectory;
        metrics << evalx::evaluate(ck.model, ds, m, ec).to_jsonl();
      }
    }
    metrics.close();

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    json rec{{"config_hash", cfg.hash()},
             {"artifact_version", io::ArrayFile::kSchemaVersion},
             {"d", d},
             {"seed", seed},
             {"seconds", secs},
             {"dataset", dataset_path},
             {"checkpoint", checkpoint_path},
             {"metrics", metrics_path}};
    std::ofstream rout(record_path, std::ios::trunc);
    rout << rec.dump(2) << "\n";
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
    log << "[cell d=" << d << " seed=" << seed << "] FAILED: " << e.what()
        << "\n";
  }
  return out;
}

MatrixResult run_matrix(const ExperimentConfig& cfg, std::ostream& log,
                        int jobs) {
  cfg.validate();
  fs::create_directories(cfg.resolved_out_dir());
  {
    std::ofstream cfg_out(cfg.resolved_out_dir() + "/config.json",
                          std::ios::trunc);
    cfg_out << cfg.to_json().dump(2) << "\n";
  }

  struct CellKey {
    int d;
    std::uint64_t seed;
  };
  std::vector<CellKey> cells;
  for (int d : cfg.d_values)
    for (std::uint64_t s : cfg.seeds) cells.push_back({d, s});

  MatrixResult result;
  if (jobs <= 1) {
    for (const auto& c : cells)
      result.cells.push_back(run_cell(cfg, c.d, c.seed, log));
  } else {
    // Worker processes keep cells fully isolated; outcomes are re-read from
    // the run records afterwards.
    std::vector<pid_t> pids(cells.size(), -1);
    int active = 0;
    std::size_t next = 0;
    auto reap = [&](bool block) {
      int status = 0;
      const pid_t pid = waitpid(-1, &status, block ? 0 : WNOHANG);
      if (pid > 0) --active;
      return pid;
    };
    while (next < cells.size() || active > 0) {
      while (next < cells.size() && active < jobs) {
        const pid_t pid = fork();
        if (pid == 0) {
          std::ostringstream sink;
          const CellOutcome oc =
              run_cell(cfg, cells[next].d, cells[next].seed, sink);
          std::fputs(sink.str().c_str(), stdout);
          _exit(oc.ok ? 0 : 1);
        }
        pids[next] = pid;
        ++next;
        ++active;
      }
      if (active > 0) reap(true);
    }
    for (const auto& c : cells) {
      CellOutcome oc;
      oc.d = c.d;
      oc.seed = c.seed;
      oc.dir = cfg.cell_dir(c.d, c.seed);
      const std::string record = oc.dir + "/run_record.json";
      oc.ok = fs::exists(record);
      if (!oc.ok) oc.error = "worker process failed (no run record)";
      result.cells.push_back(oc);
    }
  }

  for (const auto& c : result.cells)
    if (!c.ok) ++result.failed;
  if (result.failed == 0) {
    result.aggregate_path = write_aggregate(cfg);
    write_plots(cfg);
  } else {
    log << result.failed << " cell(s) failed:\n";
    for (const auto& c : result.cells)
      if (!c.ok)
        log << "  d=" << c.d << " seed=" << c.seed << ": " << c.error << "\n";
  }
  return result;
}

std::string write_aggregate(const ExperimentConfig& cfg) {
  const std::vector<MetricRecord> records = read_metrics(cfg);
  // Group by (mode, adapter, d, t); aggregate over seeds.
  std::map<std::tuple<std::string, std::string, int, double>,
           std::map<std::string, std::vector<double>>>
      groups;
  for (const auto& r : records) {
    auto& g = groups[{r.mode, r.adapter, r.d, r.t}];
    g["shd"].push_back(r.shd);
    g["dci_d"].push_back(r.dci_d);
    g["dci_c"].push_back(r.dci_c);
    g["accuracy"].push_back(r.accuracy);
  }
  json agg = json::array();
  std::ostringstream csv;
  csv << "mode,adapter,d,t,metric,mean,std,n\n";
  for (const auto& [key, metrics] : groups) {
    const auto& [mode, adapter, d, t] = key;
    json row{{"mode", mode}, {"adapter", adapter}, {"d", d}};
    if (t >= 0.0)
      row["t"] = t;
    else
      row["t"] = nullptr;
    for (const auto& [metric, values] : metrics) {
      const Stat s = mean_std(values);
      row[metric] = {{"mean", s.mean}, {"std", s.stddev}, {"n", s.count}};
      csv << mode << "," << adapter << "," << d << ","
          << (t >= 0.0 ? fmt(t) : "") << "," << metric << "," << s.mean << ","
          << s.stddev << "," << s.count << "\n";
    }
    agg.push_back(std::move(row));
  }
  const std::string path = cfg.resolved_out_dir() + "/aggregate.json";
  std::ofstream out(path, std::ios::trunc);
  out << agg.dump(2) << "\n";
  std::ofstream cout_(cfg.resolved_out_dir() + "/aggregate.csv",
                      std::ios::trunc);
  cout_ << csv.str();
  return path;
}

std::vector<std::string> write_plots(const ExperimentConfig& cfg) {
  const std::vector<MetricRecord> records = read_metrics(cfg);
  const std::string plot_dir = cfg.resolved_out_dir() + "/plots";
  fs::create_directories(plot_dir);
  std::vector<std::string> paths;
  const std::vector<std::string> metrics = {"shd", "dci_d", "dci_c",
                                            "accuracy"};
  auto metric_of = [](const MetricRecord& r, const std::string& m) {
    if (m == "shd") return r.shd;
    if (m == "dci_d") return r.dci_d;
    if (m == "dci_c") return r.dci_c;
    return r.accuracy;
  };

  // Single-mode grouped bars per metric.
  for (const auto& metric : metrics) {
    std::map<std::pair<int, std::string>, std::vector<double>> vals;
    for (const auto& r : records)
      if (r.mode == "single") vals[{r.d, r.adapter}].push_back(metric_of(r, metric));
    if (vals.empty()) continue;
    std::map<std::pair<int, std::string>, Stat> stats;
    for (const auto& [k, v] : vals) stats[k] = mean_std(v);
    const std::string path = plot_dir + "/" + metric + "_single.svg";
    bar_plot(path, metric, cfg.d_values, cfg.adapters, stats);
    paths.push_back(path);
  }

  // Trajectory-mode lines per (d, metric).
  for (int d : cfg.d_values) {
    for (const auto& metric : metrics) {
      std::map<std::pair<double, std::string>, std::vector<double>> vals;
      for (const auto& r : records)
        if (r.mode == "trajectory" && r.d == d && r.t >= 0.0)
          vals[{r.t, r.adapter}].push_back(metric_of(r, metric));
      if (vals.empty()) continue;
      std::map<std::pair<double, std::string>, Stat> stats;
      for (const auto& [k, v] : vals) stats[k] = mean_std(v);
      const std::string path =
          plot_dir + "/" + metric + "_d" + std::to_string(d) + "_trajectory.svg";
      line_plot(path, metric, d, cfg.adapters, stats);
      paths.push_back(path);
    }
  }
  return paths;
}

}  // namespace dcrl::harness
