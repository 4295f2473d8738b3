#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "sharpen/error.hpp"
#include "sharpen/harness.hpp"

namespace sharpen {

namespace fs = std::filesystem;

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  }
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Table read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw Error(path.string() + " is empty");
  t.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

void require_columns(const Table& t, const fs::path& path, std::initializer_list<const char*> names) {
  std::string missing;
  for (const char* n : names)
    if (t.column(n) == t.header.size()) missing += (missing.empty() ? "" : ", ") + std::string(n);
  if (!missing.empty()) throw Error(path.string() + " is missing columns: " + missing);
}

double cell(const Table& t, std::size_t row, std::size_t col) {
  const auto& r = t.rows[row];
  if (col >= r.size() || r[col].empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::stod(r[col]);
}

struct Series {
  std::string name;
  std::string color;
  std::vector<double> x, y;
  std::vector<double> lo, hi;  // optional band
  bool markers = false;
};

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

void write_svg(const fs::path& path, const std::string& title, const std::string& xlabel, const std::string& ylabel,
               const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 70, R = 20, Tp = 40, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.lo.empty() ? s.y[i] : s.lo[i]);
      y1 = std::max(y1, s.hi.empty() ? s.y[i] : s.hi[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tp - B); };

  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << Tp << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = x0 + (x1 - x0) * k / 4.0, fy = y0 + (y1 - y0) * k / 4.0;
    out << "<text x=\"" << px(fx) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << num(fx) << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\">" << num(fy) << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  out << "<text x=\"16\" y=\"" << (Tp + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (Tp + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  int legend = 0;
  for (const auto& s : series) {
    if (s.x.empty()) continue;
    if (!s.lo.empty()) {
      out << "<polygon fill=\"" << s.color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) out << px(s.x[i]) << ',' << py(s.hi[i]) << ' ';
      for (std::size_t i = s.x.size(); i-- > 0;) out << px(s.x[i]) << ',' << py(s.lo[i]) << ' ';
      out << "\"/>\n";
    }
    if (s.x.size() > 1) {
      out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) out << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
      out << "\"/>\n";
    }
    if (s.markers || s.x.size() == 1)
      for (std::size_t i = 0; i < s.x.size(); ++i)
        out << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"4\" fill=\"" << s.color << "\"/>\n";
    out << "<text x=\"" << W - R - 4 << "\" y=\"" << Tp + 14 * legend << "\" text-anchor=\"end\" fill=\"" << s.color
        << "\">" << s.name << "</text>\n";
    ++legend;
  }
  out << "</svg>\n";
}

}  // namespace

std::vector<fs::path> plot_emit(const fs::path& run_dir) {
  const fs::path metrics_path = run_dir / "metrics.csv";
  const Table metrics = read_csv(metrics_path);
  require_columns(metrics, metrics_path, {"step", "loss", "mean_reward", "reward_std"});
  if (metrics.rows.empty()) throw Error(metrics_path.string() + " has no rows");
  const std::size_t c_step = metrics.column("step"), c_loss = metrics.column("loss"),
                    c_mean = metrics.column("mean_reward"), c_std = metrics.column("reward_std");

  std::vector<fs::path> written;
  Series loss{"loss", "#1f77b4", {}, {}, {}, {}, false};
  Series reward{"mean reward", "#d62728", {}, {}, {}, {}, false};
  {
    std::ofstream loss_csv(run_dir / "loss_curve.csv"), reward_csv(run_dir / "reward_curve.csv");
    loss_csv << "step,loss\n";
    reward_csv << "step,mean_reward,reward_std\n";
    for (std::size_t r = 0; r < metrics.rows.size(); ++r) {
      const double step = cell(metrics, r, c_step), l = cell(metrics, r, c_loss);
      const double mu = cell(metrics, r, c_mean), sd = cell(metrics, r, c_std);
      if (!std::isnan(l)) {
        loss_csv << metrics.rows[r][c_step] << ',' << metrics.rows[r][c_loss] << '\n';
        loss.x.push_back(step);
        loss.y.push_back(l);
      }
      if (!std::isnan(mu)) {
        reward_csv << metrics.rows[r][c_step] << ',' << metrics.rows[r][c_mean] << ','
                   << (std::isnan(sd) ? "" : metrics.rows[r][c_std]) << '\n';
        reward.x.push_back(step);
        reward.y.push_back(mu);
        reward.lo.push_back(mu - (std::isnan(sd) ? 0.0 : sd));
        reward.hi.push_back(mu + (std::isnan(sd) ? 0.0 : sd));
      }
    }
  }
  written.push_back(run_dir / "loss_curve.csv");
  written.push_back(run_dir / "reward_curve.csv");
  write_svg(run_dir / "loss_curve.svg", "Fine-tuning loss", "step", "loss", {loss});
  written.push_back(run_dir / "loss_curve.svg");
  if (!reward.x.empty()) {
    write_svg(run_dir / "reward_curve.svg", "Aggregate reward (mean +- std across candidates)", "step", "reward",
              {reward});
    written.push_back(run_dir / "reward_curve.svg");
  }

  const fs::path frontier_path = run_dir / "frontier.csv";
  if (fs::exists(frontier_path)) {
    const Table f = read_csv(frontier_path);
    require_columns(f, frontier_path, {"method", "n", "nfe", "mean_reward"});
    const std::size_t c_method = f.column("method"), c_n = f.column("n"), c_nfe = f.column("nfe"),
                      c_r = f.column("mean_reward");
    std::map<std::string, Series> by_method;
    std::ofstream out(run_dir / "reward_vs_nfe.csv");
    out << "method,n,nfe,mean_reward\n";
    const char* colors[] = {"#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    for (std::size_t r = 0; r < f.rows.size(); ++r) {
      const std::string& method = f.rows[r][c_method];
      out << method << ',' << f.rows[r][c_n] << ',' << f.rows[r][c_nfe] << ',' << f.rows[r][c_r] << '\n';
      auto [it, fresh] = by_method.try_emplace(method);
      if (fresh) {
        it->second.name = method;
        it->second.color = colors[(by_method.size() - 1) % 4];
        it->second.markers = true;
      }
      it->second.x.push_back(cell(f, r, c_nfe));
      it->second.y.push_back(cell(f, r, c_r));
    }
    std::vector<Series> all;
    for (auto& [name, s] : by_method) all.push_back(std::move(s));
    written.push_back(run_dir / "reward_vs_nfe.csv");
    write_svg(run_dir / "reward_vs_nfe.svg", "Final-sample reward vs NFE per sample", "NFE per sample", "mean reward",
              all);
    written.push_back(run_dir / "reward_vs_nfe.svg");
  }
  return written;
}

}  // namespace sharpen
