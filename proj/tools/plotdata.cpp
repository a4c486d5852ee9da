#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tsgm/cli.hpp"

namespace tsgm::cli {

using nlohmann::json;

std::vector<std::string> available_series(const json& report) {
  std::vector<std::string> out;
  if (!report.contains("series")) return out;
  for (auto it = report["series"].begin(); it != report["series"].end(); ++it) out.push_back(it.key());
  return out;
}

namespace {

std::string format(const json& v) {
  if (v.is_null()) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
  return buf;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

}  // namespace

std::vector<std::string> emit_plotdata(const json& report, const std::string& selector, const std::string& dir) {
  const auto have = available_series(report);
  std::vector<std::string> wanted = selector == "all" ? have : split(selector);
  for (const auto& w : wanted)
    if (std::find(have.begin(), have.end(), w) == have.end())
      fail(ErrorKind::invalid_input, "unknown series '" + w + "'; available: " + json(have).dump());

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + dir + ": " + ec.message());

  std::vector<std::string> paths;
  for (const auto& name : wanted) {
    const json& s = report["series"][name];
    const std::string path = (fs::path(dir) / (name + ".csv")).string();
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write " + path);
    out << "# series: " << name << "\n";
    out << "# source: kind=" << report.value("kind", "") << " seed=" << report["config"].value("seed", 0)
        << " status=" << report.value("status", "") << " version=" << report["environment"].value("version", "")
        << " build=" << report["environment"].value("build", "") << "\n";
    out << "# units:";
    for (std::size_t c = 0; c < s["columns"].size(); ++c)
      out << " " << s["columns"][c].get<std::string>() << "=" << s["units"][c].get<std::string>();
    out << "\n";
    for (std::size_t c = 0; c < s["columns"].size(); ++c) out << (c ? "," : "") << s["columns"][c].get<std::string>();
    out << "\n";
    for (const auto& row : s["rows"]) {
      for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << format(row[c]);
      out << "\n";
    }
    if (!out) fail(ErrorKind::io, "write failed for " + path);
    paths.push_back(path);
  }
  return paths;
}

}  // namespace tsgm::cli
