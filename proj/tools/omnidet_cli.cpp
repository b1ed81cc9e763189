// Command-line front end: dataset generation, training, evaluation, plotting.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "omnidet/trainer.hpp"

namespace fs = std::filesystem;
using namespace omnidet;

namespace {

// ---------------------------------------------------------------------------
// Minimal raster charts: 5x7 bitmap font (digits, lowercase, a little
// punctuation), polylines, bars.
// ---------------------------------------------------------------------------

struct Color {
  unsigned char r, g, b;
};

const Color kPalette[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                          {214, 39, 40},  {148, 103, 189}, {140, 86, 75},
                          {227, 119, 194}, {127, 127, 127}};

const unsigned char* glyph5x7(char c) {
  static const std::map<char, std::array<unsigned char, 7>> font = {
      {'0', {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}},
      {'1', {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e}},
      {'2', {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}},
      {'3', {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e}},
      {'4', {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}},
      {'5', {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e}},
      {'6', {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}},
      {'7', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}},
      {'9', {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c}},
      {'-', {0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f}},
      {'+', {0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00}},
      {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
      {'a', {0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f}},
      {'b', {0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x1e}},
      {'c', {0x00, 0x00, 0x0e, 0x11, 0x10, 0x11, 0x0e}},
      {'d', {0x01, 0x01, 0x0f, 0x11, 0x11, 0x11, 0x0f}},
      {'e', {0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e}},
      {'f', {0x06, 0x08, 0x1c, 0x08, 0x08, 0x08, 0x08}},
      {'g', {0x00, 0x0f, 0x11, 0x11, 0x0f, 0x01, 0x0e}},
      {'h', {0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x11}},
      {'i', {0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e}},
      {'j', {0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0c}},
      {'k', {0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12}},
      {'l', {0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e}},
      {'m', {0x00, 0x00, 0x1a, 0x15, 0x15, 0x15, 0x15}},
      {'n', {0x00, 0x00, 0x1e, 0x11, 0x11, 0x11, 0x11}},
      {'o', {0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e}},
      {'p', {0x00, 0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10}},
      {'q', {0x00, 0x0f, 0x11, 0x11, 0x0f, 0x01, 0x01}},
      {'r', {0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10}},
      {'s', {0x00, 0x00, 0x0f, 0x10, 0x0e, 0x01, 0x1e}},
      {'t', {0x08, 0x08, 0x1c, 0x08, 0x08, 0x09, 0x06}},
      {'u', {0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d}},
      {'v', {0x00, 0x00, 0x11, 0x11, 0x11, 0x0a, 0x04}},
      {'w', {0x00, 0x00, 0x15, 0x15, 0x15, 0x15, 0x0a}},
      {'x', {0x00, 0x00, 0x11, 0x0a, 0x04, 0x0a, 0x11}},
      {'y', {0x00, 0x11, 0x11, 0x0f, 0x01, 0x11, 0x0e}},
      {'z', {0x00, 0x00, 0x1f, 0x02, 0x04, 0x08, 0x1f}},
  };
  auto it = font.find(c);
  return it == font.end() ? font.at(' ').data() : it->second.data();
}

struct Canvas {
  int w, h;
  std::vector<unsigned char> px;

  Canvas(int width, int height) : w(width), h(height), px(width * height * 3, 255) {}

  void set(int x, int y, Color c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    std::size_t i = (static_cast<std::size_t>(y) * w + x) * 3;
    px[i] = c.r;
    px[i + 1] = c.g;
    px[i + 2] = c.b;
  }
  void line(double x0, double y0, double x1, double y1, Color c) {
    int steps = static_cast<int>(std::max(std::fabs(x1 - x0), std::fabs(y1 - y0))) + 1;
    for (int i = 0; i <= steps; ++i) {
      double t = static_cast<double>(i) / steps;
      set(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
          static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
  }
  void rect(int x0, int y0, int x1, int y1, Color c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
  }
  void text(int x, int y, const std::string& s, Color c) {
    for (char ch : s) {
      const unsigned char* g = glyph5x7(static_cast<char>(std::tolower(ch)));
      for (int row = 0; row < 7; ++row)
        for (int col = 0; col < 5; ++col)
          if (g[row] & (1 << (4 - col))) set(x + col, y + row, c);
      x += 6;
    }
  }
  void save(const std::string& path) { write_rgb_png(path, px, h, w); }
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

struct Series {
  std::string name;
  std::vector<double> x, y;
};

// Shared chart frame: axes, y ticks, per-series polyline and legend entry.
void draw_chart(Canvas& canvas, const std::vector<Series>& series,
                const std::string& title) {
  const int ml = 60, mr = 20, mt = 30, mb = 30;
  const int x0 = ml, x1 = canvas.w - mr, y0 = canvas.h - mb, y1 = mt;
  Color axis{60, 60, 60};
  canvas.line(x0, y0, x1, y0, axis);
  canvas.line(x0, y0, x0, y1, axis);
  canvas.text(x0, 8, title, axis);

  double xmin = 1e300, xmax = -1e300, ymin = 0, ymax = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  auto sx = [&](double v) { return x0 + (v - xmin) / (xmax - xmin) * (x1 - x0); };
  auto sy = [&](double v) { return y0 - (v - ymin) / (ymax - ymin) * (y0 - y1); };

  for (int t = 0; t <= 4; ++t) {
    double v = ymin + (ymax - ymin) * t / 4;
    canvas.line(x0 - 3, sy(v), x0, sy(v), axis);
    canvas.text(4, static_cast<int>(sy(v)) - 3, fmt(v), axis);
  }
  canvas.text(x0, canvas.h - 12, fmt(xmin), axis);
  canvas.text(x1 - 30, canvas.h - 12, fmt(xmax), axis);

  for (std::size_t k = 0; k < series.size(); ++k) {
    Color c = kPalette[k % 8];
    const Series& s = series[k];
    for (std::size_t i = 1; i < s.x.size(); ++i)
      canvas.line(sx(s.x[i - 1]), sy(s.y[i - 1]), sx(s.x[i]), sy(s.y[i]), c);
    int ly = y1 + 4 + static_cast<int>(k) * 10;
    canvas.rect(x1 - 90, ly, x1 - 84, ly + 6, c);
    canvas.text(x1 - 80, ly, s.name, axis);
  }
}

// ---------------------------------------------------------------------------
// Subcommand payloads
// ---------------------------------------------------------------------------

std::string default_out_dir() {
  const char* env = std::getenv("OMNIDET_OUT_DIR");
  return env ? env : "run";
}

void run_gen_data(const std::string& out, std::uint64_t seed, int images, int size,
                  int classes, const std::string& split, double r_full, double r_weak,
                  double r_unlabeled) {
  auto [manifest, tensors] = data::generate_synthetic(seed, images, size, classes, split);
  auto hidden = data::assign_granularity(manifest, r_full, r_weak, r_unlabeled, seed);
  data::write_dataset(out, manifest, tensors, hidden);
  int counts[3] = {0, 0, 0};
  for (const auto& rec : manifest.records) ++counts[static_cast<int>(rec.granularity)];
  std::cout << "wrote " << images << " images to " << out << " (full " << counts[0]
            << ", weak " << counts[1] << ", unlabeled " << counts[2] << ")\n";
}

Config load_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "OMNICKP1")
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string cfg_json(len, '\0');
  is.read(cfg_json.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("corrupt checkpoint header: " + path);
  return trainer::config_from_json(nlohmann::json::parse(cfg_json));
}

void apply_set_flags(Config& cfg, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--set expects key=value, got: " + kv);
    trainer::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
}

void run_train(const std::string& data_dir, const std::string& val_dir,
               const std::string& out, const std::string& config_path,
               const std::vector<std::string>& sets, const std::string& resume,
               long long steps_flag) {
  Config cfg;
  if (!resume.empty()) cfg = load_checkpoint_config(resume);
  if (!config_path.empty()) cfg = trainer::parse_config_file(config_path, cfg);
  apply_set_flags(cfg, sets);

  fs::create_directories(out);
  std::ofstream(fs::path(out) / "config.json") << trainer::config_to_json(cfg).dump(2)
                                               << "\n";

  trainer::LoadedSplit train = trainer::load_split(data_dir);
  std::optional<trainer::LoadedSplit> val;
  if (!val_dir.empty()) val = trainer::load_split(val_dir);

  trainer::TrainState state =
      resume.empty() ? trainer::TrainState(cfg) : trainer::load_checkpoint(resume, cfg);
  long long steps = steps_flag > 0 ? steps_flag : cfg.steps - state.step;
  if (steps <= 0) throw std::runtime_error("nothing to do: step budget exhausted");

  std::ofstream log(fs::path(out) / "log.csv",
                    resume.empty() ? std::ios::trunc : std::ios::app);
  trainer::TrainRunResult result = trainer::run_training(
      state, train, data_dir, val ? &*val : nullptr, val_dir, steps, &log, &std::cerr);

  trainer::save_checkpoint(state, (fs::path(out) / "checkpoint.ckpt").string());
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : result.evals) evals.push_back({{"step", e.step}, {"map", e.map}});
  std::ofstream(fs::path(out) / "result.json")
      << nlohmann::json{{"steps", state.step},
                        {"final_map", result.final_map},
                        {"best_map", state.best_map},
                        {"final_lr", state.lr},
                        {"evals", evals}}
             .dump(2)
      << "\n";
  std::cout << "trained " << steps << " steps, final val mAP " << result.final_map
            << ", artifacts in " << out << "\n";
}

void run_eval(const std::string& data_dir, const std::string& ckpt,
              const std::string& out_csv, const std::string& dets_path,
              double score_thresh) {
  Config cfg = load_checkpoint_config(ckpt);
  trainer::TrainState state = trainer::load_checkpoint(ckpt, cfg);
  trainer::LoadedSplit split = trainer::load_split(data_dir);
  eval::EvalResult res =
      trainer::evaluate_split(state.student, state.anchors, split, data_dir, score_thresh);
  std::string csv = eval::to_csv(res);
  if (out_csv.empty()) {
    std::cout << csv;
  } else {
    std::ofstream(out_csv) << csv;
    std::cout << "mAP " << res.map << ", report written to " << out_csv << "\n";
  }
  if (!dets_path.empty()) {
    std::map<int, std::vector<Detection>> per_image;
    for (const auto& s : split.samples)
      per_image[s.id] = trainer::infer(state.student, state.anchors, s.image, score_thresh);
    eval::write_detections(dets_path, per_image);
  }
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open csv: " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

void run_plot(const std::string& log_path, const std::vector<std::string>& compares,
              const std::string& out) {
  if (!log_path.empty()) {
    auto rows = read_csv(log_path);
    if (rows.size() < 2) throw std::runtime_error("log has no data rows: " + log_path);
    const auto& header = rows[0];
    std::vector<Series> losses;
    Series val_map{"val_map", {}, {}};
    for (std::size_t col = 2; col < header.size(); ++col) {
      if (header[col] == "val_map") continue;
      losses.push_back({header[col], {}, {}});
    }
    for (std::size_t r = 1; r < rows.size(); ++r) {
      double step = std::stod(rows[r][0]);
      std::size_t k = 0;
      for (std::size_t col = 2; col < header.size() && col < rows[r].size(); ++col) {
        if (header[col] == "val_map") {
          if (!rows[r][col].empty()) {
            val_map.x.push_back(step);
            val_map.y.push_back(std::stod(rows[r][col]));
          }
        } else {
          losses[k].x.push_back(step);
          losses[k].y.push_back(std::stod(rows[r][col]));
          ++k;
        }
      }
    }
    Canvas upper(900, 420);
    draw_chart(upper, losses, "training losses");
    Canvas canvas(900, val_map.x.empty() ? 420 : 800);
    std::copy(upper.px.begin(), upper.px.end(), canvas.px.begin());
    if (!val_map.x.empty()) {
      Canvas lower(900, 380);
      draw_chart(lower, {val_map}, "validation map");
      std::copy(lower.px.begin(), lower.px.end(),
                canvas.px.begin() + 420ULL * 900 * 3);
    }
    canvas.save(out);
    std::cout << "wrote " << out << "\n";
    return;
  }
  if (compares.empty())
    throw std::runtime_error("plot needs --log or at least one --compare");
  // Bar chart of final mAP per labeled run.
  std::vector<std::pair<std::string, double>> bars;
  for (const std::string& spec : compares) {
    auto eq = spec.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--compare expects label=result.json, got: " + spec);
    std::ifstream f(spec.substr(eq + 1));
    if (!f) throw std::runtime_error("cannot open " + spec.substr(eq + 1));
    nlohmann::json j = nlohmann::json::parse(f);
    bars.emplace_back(spec.substr(0, eq), j.at("final_map").get<double>());
  }
  Canvas canvas(200 + 140 * static_cast<int>(bars.size()), 420);
  Color axis{60, 60, 60};
  const int y0 = 360, y1 = 40, x0 = 60;
  double ymax = 0;
  for (const auto& [_, v] : bars) ymax = std::max(ymax, v);
  if (ymax <= 0) ymax = 1;
  canvas.line(x0, y0, canvas.w - 20, y0, axis);
  canvas.line(x0, y0, x0, y1, axis);
  for (int t = 0; t <= 4; ++t) {
    double v = ymax * t / 4;
    int y = y0 - static_cast<int>((y0 - y1) * (t / 4.0));
    canvas.line(x0 - 3, y, x0, y, axis);
    canvas.text(4, y - 3, fmt(v), axis);
  }
  canvas.text(x0, 8, "final map by run", axis);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    int bx = x0 + 40 + static_cast<int>(i) * 140;
    int bh = static_cast<int>((y0 - y1) * bars[i].second / ymax);
    canvas.rect(bx, y0 - bh, bx + 80, y0 - 1, kPalette[i % 8]);
    canvas.text(bx, y0 + 8, bars[i].first, axis);
    canvas.text(bx + 20, y0 - bh - 12, fmt(bars[i].second), axis);
  }
  canvas.save(out);
  std::cout << "wrote " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"omni-supervised lesion detector"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset split");
  std::string gen_out = default_out_dir();
  std::uint64_t gen_seed = 0;
  int gen_images = 100, gen_size = 64, gen_classes = 3;
  std::string gen_split = "train";
  double r_full = 1.0, r_weak = 0.0, r_unlabeled = 0.0;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--images", gen_images, "number of images");
  gen->add_option("--size", gen_size, "square image size in pixels");
  gen->add_option("--classes", gen_classes, "number of lesion classes (1..9)");
  gen->add_option("--split", gen_split, "split name");
  gen->add_option("--full", r_full, "fraction with box annotations");
  gen->add_option("--weak", r_weak, "fraction with image labels only");
  gen->add_option("--unlabeled", r_unlabeled, "fraction without annotations");

  auto* train = app.add_subcommand("train", "train a detector");
  std::string tr_data, tr_val, tr_out = default_out_dir(), tr_config, tr_resume;
  std::vector<std::string> tr_sets;
  long long tr_steps = 0;
  train->add_option("--data", tr_data, "training split directory")->required();
  train->add_option("--val", tr_val, "validation split directory");
  train->add_option("--out", tr_out, "artifact directory");
  train->add_option("--config", tr_config, "key=value config file");
  train->add_option("--set", tr_sets, "config override key=value (repeatable)");
  train->add_option("--resume", tr_resume, "checkpoint to resume from");
  train->add_option("--steps", tr_steps, "steps to run (default: config budget)");

  auto* ev = app.add_subcommand("eval", "score a checkpoint against a split");
  std::string ev_data, ev_ckpt, ev_out, ev_dets;
  double ev_thresh = 0.05;
  ev->add_option("--data", ev_data, "split directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--out", ev_out, "csv report path (default: stdout)");
  ev->add_option("--detections", ev_dets, "also dump detections jsonl here");
  ev->add_option("--score-thresh", ev_thresh, "detection score threshold");

  auto* plot = app.add_subcommand("plot", "render charts from run artifacts");
  std::string pl_log, pl_out = "chart.png";
  std::vector<std::string> pl_compare;
  plot->add_option("--log", pl_log, "log.csv to plot loss curves from");
  plot->add_option("--compare", pl_compare, "label=result.json bars (repeatable)");
  plot->add_option("--out", pl_out, "output png");

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      run_gen_data(gen_out, gen_seed, gen_images, gen_size, gen_classes, gen_split,
                   r_full, r_weak, r_unlabeled);
    else if (train->parsed())
      run_train(tr_data, tr_val, tr_out, tr_config, tr_sets, tr_resume, tr_steps);
    else if (ev->parsed())
      run_eval(ev_data, ev_ckpt, ev_out, ev_dets, ev_thresh);
    else if (plot->parsed())
      run_plot(pl_log, pl_compare, pl_out);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
