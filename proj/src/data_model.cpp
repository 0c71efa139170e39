#include "adatrans/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "adatrans/rng.hpp"

namespace adatrans {

namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

PopulationData PopulationData::take_rows(const std::vector<int>& rows) const {
  PopulationData out;
  out.pop_id = pop_id;
  const auto k = static_cast<Eigen::Index>(rows.size());
  out.x.resize(k, x.cols());
  out.w.resize(k);
  out.y.resize(k);
  if (has_truth()) {
    out.y0_true = Eigen::VectorXd(k);
    out.y1_true = Eigen::VectorXd(k);
  }
  for (Eigen::Index i = 0; i < k; ++i) {
    const int r = rows[static_cast<std::size_t>(i)];
    out.x.row(i) = x.row(r);
    out.w(i) = w(r);
    out.y(i) = y(r);
    if (has_truth()) {
      (*out.y0_true)(i) = (*y0_true)(r);
      (*out.y1_true)(i) = (*y1_true)(r);
    }
  }
  return out;
}

int MultiSourceDataset::total_n() const {
  int n = target.n();
  for (const auto& s : sources) n += s.n();
  return n;
}

namespace {

std::vector<std::string> split_line(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  auto e = s.find_last_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& field, const std::string& where) {
  const char* begin = field.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0') {
    throw SchemaMismatch("unparseable number '" + field + "' in " + where);
  }
  return v;
}

void check_binary(double v, const std::string& where) {
  if (v != 0.0 && v != 1.0) {
    throw ValueError("non-binary value " + format_double(v) + " in " + where);
  }
}

std::vector<std::string> expected_header(int d_x, bool with_truth) {
  std::vector<std::string> h;
  for (int j = 0; j < d_x; ++j) h.push_back("x" + std::to_string(j));
  h.push_back("w");
  h.push_back("y");
  if (with_truth) {
    h.push_back("y0_true");
    h.push_back("y1_true");
  }
  return h;
}

PopulationData load_population_csv(const std::string& path, const std::string& pop_id,
                                   const DataSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IOFailure("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw EmptyPopulation(path + " has no header");
  const auto header = split_line(line, ',');
  const int d_x = schema.d_x();
  bool with_truth;
  if (header == expected_header(d_x, false)) {
    with_truth = false;
  } else if (header == expected_header(d_x, true)) {
    with_truth = true;
  } else {
    throw SchemaMismatch(path + ": header does not match schema (d_x=" + std::to_string(d_x) + ")");
  }
  const std::size_t ncols = header.size();

  std::vector<std::vector<double>> rows;
  std::vector<std::pair<double, double>> truth;
  std::vector<bool> truth_present;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto fields = split_line(line, ',');
    if (fields.size() != ncols) {
      throw SchemaMismatch(path + ":" + std::to_string(lineno) + ": expected " +
                           std::to_string(ncols) + " fields, got " + std::to_string(fields.size()));
    }
    std::vector<double> vals(static_cast<std::size_t>(d_x) + 2);
    for (int j = 0; j < d_x; ++j) {
      const std::string where = path + ":" + std::to_string(lineno) + " col x" + std::to_string(j);
      vals[static_cast<std::size_t>(j)] = parse_double(fields[static_cast<std::size_t>(j)], where);
      if (schema.proxy_types[static_cast<std::size_t>(j)] == ProxyType::Binary) {
        check_binary(vals[static_cast<std::size_t>(j)], where);
      }
    }
    const std::string where_w = path + ":" + std::to_string(lineno) + " col w";
    const double wv = parse_double(fields[static_cast<std::size_t>(d_x)], where_w);
    check_binary(wv, where_w);
    vals[static_cast<std::size_t>(d_x)] = wv;
    const std::string where_y = path + ":" + std::to_string(lineno) + " col y";
    const double yv = parse_double(fields[static_cast<std::size_t>(d_x) + 1], where_y);
    if (schema.outcome_kind == OutcomeKind::Binary) check_binary(yv, where_y);
    vals[static_cast<std::size_t>(d_x) + 1] = yv;
    rows.push_back(std::move(vals));

    if (with_truth) {
      const std::string& f0 = fields[static_cast<std::size_t>(d_x) + 2];
      const std::string& f1 = fields[static_cast<std::size_t>(d_x) + 3];
      const bool p0 = !trim(f0).empty();
      const bool p1 = !trim(f1).empty();
      if (p0 != p1) {
        throw SchemaMismatch(path + ":" + std::to_string(lineno) +
                             ": y0_true/y1_true must both be present or both empty");
      }
      truth_present.push_back(p0);
      if (p0) {
        truth.emplace_back(parse_double(f0, "y0_true"), parse_double(f1, "y1_true"));
      } else {
        truth.emplace_back(0.0, 0.0);
      }
    }
  }
  if (rows.empty()) throw EmptyPopulation(path + " has no data rows");

  PopulationData pop;
  pop.pop_id = pop_id;
  const auto n = static_cast<Eigen::Index>(rows.size());
  pop.x.resize(n, d_x);
  pop.w.resize(n);
  pop.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (int j = 0; j < d_x; ++j) pop.x(i, j) = r[static_cast<std::size_t>(j)];
    pop.w(i) = r[static_cast<std::size_t>(d_x)];
    pop.y(i) = r[static_cast<std::size_t>(d_x) + 1];
  }
  if (with_truth) {
    const bool all = std::all_of(truth_present.begin(), truth_present.end(), [](bool b) { return b; });
    const bool none = std::none_of(truth_present.begin(), truth_present.end(), [](bool b) { return b; });
    if (!all && !none) {
      throw SchemaMismatch(path + ": ground-truth outcomes must be present for all rows or none");
    }
    if (all) {
      pop.y0_true = Eigen::VectorXd(n);
      pop.y1_true = Eigen::VectorXd(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        (*pop.y0_true)(i) = truth[static_cast<std::size_t>(i)].first;
        (*pop.y1_true)(i) = truth[static_cast<std::size_t>(i)].second;
      }
    }
  }
  return pop;
}

void write_population_csv(const PopulationData& pop, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IOFailure("cannot write " + path);
  const int d_x = pop.d_x();
  for (int j = 0; j < d_x; ++j) out << "x" << j << ",";
  out << "w,y";
  if (pop.has_truth()) out << ",y0_true,y1_true";
  out << "\n";
  for (int i = 0; i < pop.n(); ++i) {
    for (int j = 0; j < d_x; ++j) out << format_double(pop.x(i, j)) << ",";
    out << format_double(pop.w(i)) << "," << format_double(pop.y(i));
    if (pop.has_truth()) {
      out << "," << format_double((*pop.y0_true)(i)) << "," << format_double((*pop.y1_true)(i));
    }
    out << "\n";
  }
}

std::vector<ProxyType> parse_proxy_types(const std::string& value) {
  std::vector<ProxyType> types;
  const std::string v = trim(value);
  // Compact form "b*30" / "c*12"; otherwise a comma list of b/c flags.
  const auto star = v.find('*');
  if (star != std::string::npos) {
    const std::string flag = trim(v.substr(0, star));
    const int count = std::stoi(v.substr(star + 1));
    if (flag != "b" && flag != "c") throw SchemaMismatch("bad proxy_types flag '" + flag + "'");
    types.assign(static_cast<std::size_t>(count),
                 flag == "b" ? ProxyType::Binary : ProxyType::Continuous);
    return types;
  }
  for (const auto& tok : split_line(v, ',')) {
    const std::string f = trim(tok);
    if (f == "b") {
      types.push_back(ProxyType::Binary);
    } else if (f == "c") {
      types.push_back(ProxyType::Continuous);
    } else {
      throw SchemaMismatch("bad proxy_types entry '" + f + "'");
    }
  }
  return types;
}

std::string proxy_types_to_string(const std::vector<ProxyType>& types) {
  const bool all_b = std::all_of(types.begin(), types.end(),
                                 [](ProxyType t) { return t == ProxyType::Binary; });
  if (all_b && !types.empty()) return "b*" + std::to_string(types.size());
  std::string s;
  for (std::size_t j = 0; j < types.size(); ++j) {
    if (j) s += ",";
    s += types[j] == ProxyType::Binary ? "b" : "c";
  }
  return s;
}

}  // namespace

MultiSourceDataset load_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IOFailure("cannot open manifest " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();

  std::string target_id;
  std::vector<std::pair<std::string, std::string>> pops;  // id -> path, file order
  DataSchema schema;
  bool have_types = false, have_outcome = false;

  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw SchemaMismatch("manifest line without '=': " + t);
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key == "target") {
      target_id = value;
    } else if (key.rfind("pop.", 0) == 0) {
      pops.emplace_back(key.substr(4), value);
    } else if (key == "proxy_types") {
      schema.proxy_types = parse_proxy_types(value);
      have_types = true;
    } else if (key == "outcome") {
      if (value == "continuous") {
        schema.outcome_kind = OutcomeKind::Continuous;
      } else if (value == "binary") {
        schema.outcome_kind = OutcomeKind::Binary;
      } else {
        throw SchemaMismatch("bad outcome kind '" + value + "'");
      }
      have_outcome = true;
    }
    // other keys (generator echoes) are ignored by the loader
  }
  if (target_id.empty()) throw SchemaMismatch("manifest names no target");
  if (!have_types) throw SchemaMismatch("manifest missing proxy_types");
  if (!have_outcome) throw SchemaMismatch("manifest missing outcome");

  MultiSourceDataset data;
  data.schema = schema;
  bool target_seen = false;
  for (const auto& [id, rel] : pops) {
    const std::string path = (base / rel).string();
    PopulationData pop = load_population_csv(path, id, schema);
    if (id == target_id) {
      data.target = std::move(pop);
      target_seen = true;
    } else {
      data.sources.push_back(std::move(pop));
    }
  }
  if (!target_seen) throw SchemaMismatch("target population '" + target_id + "' has no pop. entry");
  return data;
}

void save_dataset(const MultiSourceDataset& data, const std::string& dir,
                  const std::vector<std::string>& extra_keys) {
  fs::create_directories(dir);
  const fs::path base(dir);
  std::ofstream mf(base / "manifest.txt");
  if (!mf) throw IOFailure("cannot write manifest in " + dir);
  mf << "target = " << data.target.pop_id << "\n";
  mf << "outcome = "
     << (data.schema.outcome_kind == OutcomeKind::Binary ? "binary" : "continuous") << "\n";
  mf << "proxy_types = " << proxy_types_to_string(data.schema.proxy_types) << "\n";
  write_population_csv(data.target, (base / (data.target.pop_id + ".csv")).string());
  mf << "pop." << data.target.pop_id << " = " << data.target.pop_id << ".csv\n";
  for (const auto& s : data.sources) {
    write_population_csv(s, (base / (s.pop_id + ".csv")).string());
    mf << "pop." << s.pop_id << " = " << s.pop_id << ".csv\n";
  }
  for (const auto& k : extra_keys) mf << k << "\n";
}

TargetSplit split_target(const MultiSourceDataset& data, const SplitSpec& spec) {
  if (spec.n_train < 0 || spec.n_val < 0 || spec.n_test < 0) {
    throw SplitTooLarge("negative split count");
  }
  const long total = static_cast<long>(spec.n_train) + spec.n_val + spec.n_test;
  if (total > data.target.n()) {
    throw SplitTooLarge("split wants " + std::to_string(total) + " rows, target has " +
                        std::to_string(data.target.n()));
  }
  std::vector<int> idx(static_cast<std::size_t>(data.target.n()));
  for (int i = 0; i < data.target.n(); ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(spec.seed);
  shuffle_inplace(idx, rng);

  auto slice = [&](int begin, int count) {
    std::vector<int> rows(idx.begin() + begin, idx.begin() + begin + count);
    std::sort(rows.begin(), rows.end());
    return data.target.take_rows(rows);
  };

  TargetSplit out;
  out.train.schema = data.schema;
  out.val.schema = data.schema;
  out.test.schema = data.schema;
  out.train.target = slice(0, spec.n_train);
  out.val.target = slice(spec.n_train, spec.n_val);
  out.test.target = slice(spec.n_train + spec.n_val, spec.n_test);
  out.train.sources = data.sources;
  return out;
}

namespace {

void validate_population(const PopulationData& pop, const DataSchema& schema,
                         std::vector<Finding>& out) {
  if (pop.n() == 0) {
    out.push_back({pop.pop_id, -1, -1, "EmptyPopulation", "population has no rows"});
    return;
  }
  if (pop.d_x() != schema.d_x()) {
    out.push_back({pop.pop_id, -1, -1, "DimMismatch",
                   "d_x " + std::to_string(pop.d_x()) + " != schema " + std::to_string(schema.d_x())});
    return;
  }
  if (pop.w.size() != pop.n() || pop.x.rows() != pop.n()) {
    out.push_back({pop.pop_id, -1, -1, "DimMismatch", "vector lengths differ"});
    return;
  }
  for (int i = 0; i < pop.n(); ++i) {
    for (int j = 0; j < pop.d_x(); ++j) {
      const double v = pop.x(i, j);
      if (!std::isfinite(v)) {
        out.push_back({pop.pop_id, i, j, "NonFinite", "proxy value is not finite"});
      } else if (schema.proxy_types[static_cast<std::size_t>(j)] == ProxyType::Binary &&
                 v != 0.0 && v != 1.0) {
        out.push_back({pop.pop_id, i, j, "NonBinaryProxy", "binary proxy holds " + format_double(v)});
      }
    }
    if (pop.w(i) != 0.0 && pop.w(i) != 1.0) {
      out.push_back({pop.pop_id, i, -1, "NonBinaryTreatment", "w = " + format_double(pop.w(i))});
    }
    const double yv = pop.y(i);
    if (!std::isfinite(yv)) {
      out.push_back({pop.pop_id, i, -1, "NonFinite", "outcome is not finite"});
    } else if (schema.outcome_kind == OutcomeKind::Binary && yv != 0.0 && yv != 1.0) {
      out.push_back({pop.pop_id, i, -1, "NonBinaryOutcome", "binary outcome holds " + format_double(yv)});
    }
    if (pop.has_truth()) {
      const double expect = pop.w(i) * (*pop.y1_true)(i) + (1.0 - pop.w(i)) * (*pop.y0_true)(i);
      if (std::isfinite(yv) && yv != expect) {
        out.push_back({pop.pop_id, i, -1, "OutcomeIdentity",
                       "y differs from the selected potential outcome"});
      }
    }
  }
}

}  // namespace

ValidationReport validate(const MultiSourceDataset& data) {
  ValidationReport report;
  validate_population(data.target, data.schema, report.findings);
  for (const auto& s : data.sources) {
    validate_population(s, data.schema, report.findings);
    if (s.pop_id == data.target.pop_id) {
      report.findings.push_back({s.pop_id, -1, -1, "DuplicatePopId",
                                 "source shares the target's pop id"});
    }
  }
  for (std::size_t a = 0; a < data.sources.size(); ++a) {
    for (std::size_t b = a + 1; b < data.sources.size(); ++b) {
      if (data.sources[a].pop_id == data.sources[b].pop_id) {
        report.findings.push_back({data.sources[a].pop_id, -1, -1, "DuplicatePopId",
                                   "two sources share a pop id"});
      }
    }
  }
  return report;
}

}  // namespace adatrans
