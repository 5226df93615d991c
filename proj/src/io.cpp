#include "branchtopo/io.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace branchtopo::io {
namespace {

using nlohmann::json;

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && std::isspace(static_cast<unsigned char>(f.back()))) f.pop_back();
    size_t b = 0;
    while (b < f.size() && std::isspace(static_cast<unsigned char>(f[b]))) ++b;
    f.erase(0, b);
  }
  return out;
}

double parse_double(const std::string& s, const std::string& path, int line_no) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw DataError(path + ":" + std::to_string(line_no) + ": bad number '" + s + "'");
  }
  return v;
}

int parse_int(const std::string& s, const std::string& path, int line_no) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw DataError(path + ":" + std::to_string(line_no) + ": bad integer '" + s + "'");
  }
  return v;
}

bool looks_like_header(const std::string& line) {
  for (char c : line) {
    if (std::isalpha(static_cast<unsigned char>(c))) return true;
  }
  return false;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

void save_cloud_csv(const std::string& path, const LabeledPointCloud& cloud) {
  std::string out;
  out.reserve(static_cast<size_t>(cloud.coords.size()) * 32 + 32);
  out += cloud.coords.dim == 2 ? "x,y,instance,class\n" : "x,y,z,instance,class\n";
  for (int i = 0; i < cloud.coords.size(); ++i) {
    const double* r = cloud.coords.row(i);
    for (int d = 0; d < cloud.coords.dim; ++d) {
      out += format_double(r[d]);
      out += ',';
    }
    out += std::to_string(cloud.instance[i]);
    out += ',';
    out += std::to_string(static_cast<int>(cloud.cls[i]));
    out += '\n';
  }
  write_text_file(path, out);
}

LoadedCloud load_cloud_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);

  std::string line;
  int line_no = 0;
  int dim = 0;
  bool has_labels = false;
  bool header_seen = false;
  std::vector<std::vector<std::string>> rows;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && looks_like_header(line)) {
      auto fields = split_csv(line);
      if (fields.size() == 2 && fields[0] == "x" && fields[1] == "y") {
        dim = 2;
      } else if (fields.size() == 3 && fields[0] == "x" && fields[1] == "y" && fields[2] == "z") {
        dim = 3;
      } else if (fields.size() == 4 && fields[2] == "instance" && fields[3] == "class") {
        dim = 2;
        has_labels = true;
      } else if (fields.size() == 5 && fields[3] == "instance" && fields[4] == "class") {
        dim = 3;
        has_labels = true;
      } else {
        throw DataError(path + ": unrecognized header '" + line + "'");
      }
      header_seen = true;
      continue;
    }
    rows.push_back(split_csv(line));
    rows.back().push_back(std::to_string(line_no));  // keep for diagnostics
  }

  if (rows.empty() && !header_seen) throw DataError(path + ": no data rows");

  if (!header_seen) {
    size_t cols = rows[0].size() - 1;
    switch (cols) {
      case 2: dim = 2; break;
      case 3: dim = 3; break;
      case 4: dim = 2; has_labels = true; break;
      case 5: dim = 3; has_labels = true; break;
      default:
        throw DataError(path + ": cannot infer layout from " + std::to_string(cols) + " columns");
    }
  }

  const size_t expect = static_cast<size_t>(dim) + (has_labels ? 2 : 0);
  LoadedCloud result;
  result.cloud.coords = PointArray(dim);
  result.has_labels = has_labels;

  for (const auto& fields : rows) {
    const int ln = parse_int(fields.back(), path, 0);
    if (fields.size() - 1 != expect) {
      throw DataError(path + ":" + std::to_string(ln) + ": expected " + std::to_string(expect) +
                      " columns, got " + std::to_string(fields.size() - 1));
    }
    double coords[3];
    for (int d = 0; d < dim; ++d) coords[d] = parse_double(fields[d], path, ln);
    result.cloud.coords.push_row(coords);
    if (has_labels) {
      result.cloud.instance.push_back(parse_int(fields[dim], path, ln));
      const int c = parse_int(fields[dim + 1], path, ln);
      if (c < 0 || c > 2) {
        throw DataError(path + ":" + std::to_string(ln) + ": class out of range");
      }
      result.cloud.cls.push_back(static_cast<PointClass>(c));
    }
  }
  return result;
}

json gen_config_to_json(const gen::GenConfig& cfg) {
  return json{{"dim", cfg.dim},
              {"max_levels", cfg.max_levels},
              {"p_trifurcation", cfg.p_trifurcation},
              {"start_angle_min_deg", cfg.start_angle_min_deg},
              {"start_angle_max_deg", cfg.start_angle_max_deg},
              {"steps_mean", cfg.steps_mean},
              {"steps_sd", cfg.steps_sd},
              {"step_angle_sd_min_deg", cfg.step_angle_sd_min_deg},
              {"step_angle_sd_max_deg", cfg.step_angle_sd_max_deg},
              {"step_len_max", cfg.step_len_max},
              {"grid_size", cfg.grid_size},
              {"endpoint_radius", cfg.endpoint_radius},
              {"fixed_levels", cfg.fixed_levels},
              {"fixed_length", cfg.fixed_length}};
}

gen::GenConfig gen_config_from_json(const json& j) {
  gen::GenConfig cfg;
  cfg.dim = j.at("dim").get<int>();
  cfg.max_levels = j.at("max_levels").get<int>();
  cfg.p_trifurcation = j.at("p_trifurcation").get<double>();
  cfg.start_angle_min_deg = j.at("start_angle_min_deg").get<double>();
  cfg.start_angle_max_deg = j.at("start_angle_max_deg").get<double>();
  cfg.steps_mean = j.at("steps_mean").get<double>();
  cfg.steps_sd = j.at("steps_sd").get<double>();
  cfg.step_angle_sd_min_deg = j.at("step_angle_sd_min_deg").get<double>();
  cfg.step_angle_sd_max_deg = j.at("step_angle_sd_max_deg").get<double>();
  cfg.step_len_max = j.at("step_len_max").get<double>();
  cfg.grid_size = j.at("grid_size").get<int>();
  cfg.endpoint_radius = j.at("endpoint_radius").get<double>();
  cfg.fixed_levels = j.at("fixed_levels").get<int>();
  cfg.fixed_length = j.at("fixed_length").get<bool>();
  cfg.validate();
  return cfg;
}

json aug_config_to_json(const gen::AugConfig& cfg) {
  return json{{"jitter_sd", cfg.jitter_sd},
              {"dropout_p", cfg.dropout_p},
              {"n_points", cfg.n_points},
              {"rng_seed", cfg.rng_seed}};
}

gen::AugConfig aug_config_from_json(const json& j) {
  gen::AugConfig cfg;
  cfg.jitter_sd = j.at("jitter_sd").get<double>();
  cfg.dropout_p = j.at("dropout_p").get<double>();
  cfg.n_points = j.at("n_points").get<int>();
  cfg.rng_seed = j.at("rng_seed").get<uint64_t>();
  cfg.validate();
  return cfg;
}

json points_to_json(const PointArray& pts) {
  json arr = json::array();
  for (int i = 0; i < pts.size(); ++i) {
    json row = json::array();
    for (int d = 0; d < pts.dim; ++d) row.push_back(pts.at(i, d));
    arr.push_back(std::move(row));
  }
  return arr;
}

PointArray points_from_json(const json& j, int dim) {
  PointArray pts(dim);
  for (const auto& row : j) {
    if (static_cast<int>(row.size()) != dim) throw DataError("point row has wrong arity");
    double buf[3];
    for (int d = 0; d < dim; ++d) buf[d] = row[d].get<double>();
    pts.push_row(buf);
  }
  return pts;
}

void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    json j{{"file", e.file},
           {"seed", e.seed},
           {"gen", gen_config_to_json(e.gen_cfg)},
           {"aug", aug_config_to_json(e.aug_cfg)},
           {"junctions", points_to_json(e.junctions)},
           {"terminals", points_to_json(e.terminals)},
           {"n_instances", e.n_instances}};
    out += j.dump();
    out += '\n';
  }
  write_text_file(path, out);
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    ManifestEntry e;
    try {
      e.file = j.at("file").get<std::string>();
      e.seed = j.at("seed").get<uint64_t>();
      e.gen_cfg = gen_config_from_json(j.at("gen"));
      e.aug_cfg = aug_config_from_json(j.at("aug"));
      e.junctions = points_from_json(j.at("junctions"), e.gen_cfg.dim);
      e.terminals = points_from_json(j.at("terminals"), e.gen_cfg.dim);
      e.n_instances = j.at("n_instances").get<int>();
    } catch (const json::exception& ex) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + ex.what());
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace branchtopo::io
