#include "adatrans/serialize.hpp"

#include <fstream>

#include <json.hpp>

namespace adatrans {

namespace {

using nlohmann::json;

json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::MatrixXd mat_from(const json& j) {
  const auto rows = j.size();
  const auto cols = rows == 0 ? 0 : j.at(0).size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = j.at(i).at(c).get<double>();
  return m;
}

Eigen::VectorXd vec_from(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j.at(i).get<double>();
  return v;
}

json kernel_to_json(const BaseKernelSpec& k) {
  return {{"family", k.family == KernelFamily::RBF ? "rbf" : "linear"},
          {"lengthscale", k.lengthscale},
          {"amplitude", k.amplitude}};
}

BaseKernelSpec kernel_from_json(const json& j) {
  BaseKernelSpec k;
  k.family = j.at("family").get<std::string>() == "linear" ? KernelFamily::Linear
                                                           : KernelFamily::RBF;
  k.lengthscale = j.at("lengthscale").get<double>();
  k.amplitude = j.at("amplitude").get<double>();
  return k;
}

json factors_to_json(const TransferFactors& f) {
  json j;
  switch (f.mode()) {
    case TransferFactors::Mode::Adaptive:
      j["mode"] = "adaptive";
      j["thetas"] = to_json(f.thetas());
      break;
    case TransferFactors::Mode::Pinned:
      j["mode"] = "pinned";
      j["value"] = f.num_pops() > 1 ? f.matrix()(0, 1) : 1.0;
      break;
    case TransferFactors::Mode::Fixed:
      j["mode"] = "fixed";
      j["values"] = to_json(f.matrix());
      break;
  }
  j["num_pops"] = f.num_pops();
  return j;
}

TransferFactors factors_from_json(const json& j, FactorLevel level) {
  const int m = j.at("num_pops").get<int>() - 1;
  const std::string mode = j.at("mode").get<std::string>();
  if (mode == "adaptive") {
    TransferFactors f = TransferFactors::adaptive(level, m);
    f.set_thetas(vec_from(j.at("thetas")));
    return f;
  }
  if (mode == "pinned") {
    return TransferFactors::pinned(level, m, j.at("value").get<double>());
  }
  return TransferFactors::fixed_matrix(level, mat_from(j.at("values")));
}

json tagged_to_json(const TaggedPoints& t) {
  return {{"points", to_json(t.points)}, {"pops", t.pop_index}};
}

TaggedPoints tagged_from_json(const json& j) {
  TaggedPoints t;
  t.points = mat_from(j.at("points"));
  t.pop_index = j.at("pops").get<std::vector<int>>();
  return t;
}

std::string proxy_types_str(const std::vector<ProxyType>& types) {
  std::string s;
  for (ProxyType t : types) s.push_back(t == ProxyType::Binary ? 'b' : 'c');
  return s;
}

std::vector<ProxyType> proxy_types_parse(const std::string& s) {
  std::vector<ProxyType> out;
  for (char c : s) out.push_back(c == 'b' ? ProxyType::Binary : ProxyType::Continuous);
  return out;
}

}  // namespace

void save_bundle(const ModelBundle& b, const std::string& path, const std::string& config_echo,
                 std::uint64_t seed) {
  json j;
  j["format"] = "adatrans-model";
  j["version"] = 1;
  j["seed"] = seed;
  j["config_echo"] = config_echo;

  const ConfounderModel& c = b.confounder;
  json jc;
  jc["d_z"] = c.config.d_z;
  jc["sigma_z"] = c.config.sigma_z;
  jc["outcome"] = c.config.outcome_kind == OutcomeKind::Binary ? "binary" : "continuous";
  jc["sigma_y"] = c.config.sigma_y;
  jc["proxy_types"] = proxy_types_str(c.proxy_types);
  jc["alpha_y0"] = to_json(c.alpha_y0);
  jc["alpha_y1"] = to_json(c.alpha_y1);
  jc["alpha_w"] = to_json(c.alpha_w);
  jc["alpha_x"] = to_json(c.alpha_x);
  jc["alpha_q0"] = to_json(c.alpha_q0);
  jc["alpha_q1"] = to_json(c.alpha_q1);
  jc["k_y0"] = kernel_to_json(c.k_y0);
  jc["k_y1"] = kernel_to_json(c.k_y1);
  jc["k_w"] = kernel_to_json(c.k_w);
  jc["k_x"] = kernel_to_json(c.k_x);
  jc["k_q0"] = kernel_to_json(c.k_q0);
  jc["k_q1"] = kernel_to_json(c.k_q1);
  jc["sigma_q"] = c.sigma_q;
  jc["lambda"] = factors_to_json(c.lambda);
  jc["z_anchors"] = tagged_to_json(c.z_anchors);
  jc["q_anchors"] = tagged_to_json(c.q_anchors);
  jc["y_mean"] = c.y_std.mean;
  jc["y_scale"] = c.y_std.std;
  j["confounder"] = std::move(jc);

  const OutcomeRegressor& o = b.outcome;
  json jo;
  jo["outcome"] = o.outcome_kind == OutcomeKind::Binary ? "binary" : "continuous";
  jo["beta_g0"] = to_json(o.beta_g0);
  jo["beta_g1"] = to_json(o.beta_g1);
  jo["psi_y"] = kernel_to_json(o.psi_y);
  jo["delta"] = factors_to_json(o.delta);
  jo["anchors"] = tagged_to_json(o.anchors);
  jo["x_mean"] = to_json(o.x_std.mean);
  jo["x_scale"] = to_json(o.x_std.std);
  jo["y_mean"] = o.y_std.mean;
  jo["y_scale"] = o.y_std.std;
  jo["sigma_y_tilde"] = o.sigma_y_tilde;
  jo["gamma_y0"] = o.gamma_y0;
  jo["gamma_y1"] = o.gamma_y1;
  j["outcome_model"] = std::move(jo);

  const PropensityModel& p = b.propensity;
  json jp;
  jp["beta_h"] = to_json(p.beta_h);
  jp["psi_w"] = kernel_to_json(p.psi_w);
  jp["eta"] = factors_to_json(p.eta);
  jp["anchors"] = tagged_to_json(p.anchors);
  jp["x_mean"] = to_json(p.x_std.mean);
  jp["x_scale"] = to_json(p.x_std.std);
  jp["gamma_w"] = p.gamma_w;
  j["propensity"] = std::move(jp);

  std::ofstream out(path);
  if (!out) throw IOFailure("cannot write " + path);
  out << j.dump(1) << "\n";
}

ModelBundle load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IOFailure("cannot open " + path);
  json j;
  in >> j;
  if (j.value("format", "") != "adatrans-model") {
    throw ModelSchemaMismatch(path + " is not a model archive");
  }

  ModelBundle b;
  {
    const json& jc = j.at("confounder");
    ConfounderModel& c = b.confounder;
    c.config.d_z = jc.at("d_z").get<int>();
    c.config.sigma_z = jc.at("sigma_z").get<double>();
    c.config.outcome_kind = jc.at("outcome").get<std::string>() == "binary"
                                ? OutcomeKind::Binary
                                : OutcomeKind::Continuous;
    c.config.sigma_y = jc.at("sigma_y").get<double>();
    c.proxy_types = proxy_types_parse(jc.at("proxy_types").get<std::string>());
    c.alpha_y0 = vec_from(jc.at("alpha_y0"));
    c.alpha_y1 = vec_from(jc.at("alpha_y1"));
    c.alpha_w = vec_from(jc.at("alpha_w"));
    c.alpha_x = mat_from(jc.at("alpha_x"));
    c.alpha_q0 = mat_from(jc.at("alpha_q0"));
    c.alpha_q1 = mat_from(jc.at("alpha_q1"));
    c.k_y0 = kernel_from_json(jc.at("k_y0"));
    c.k_y1 = kernel_from_json(jc.at("k_y1"));
    c.k_w = kernel_from_json(jc.at("k_w"));
    c.k_x = kernel_from_json(jc.at("k_x"));
    c.k_q0 = kernel_from_json(jc.at("k_q0"));
    c.k_q1 = kernel_from_json(jc.at("k_q1"));
    c.sigma_q = jc.at("sigma_q").get<double>();
    c.lambda = factors_from_json(jc.at("lambda"), FactorLevel::L1Lambda);
    c.z_anchors = tagged_from_json(jc.at("z_anchors"));
    c.q_anchors = tagged_from_json(jc.at("q_anchors"));
    c.y_std.mean = jc.at("y_mean").get<double>();
    c.y_std.std = jc.at("y_scale").get<double>();
  }
  {
    const json& jo = j.at("outcome_model");
    OutcomeRegressor& o = b.outcome;
    o.outcome_kind = jo.at("outcome").get<std::string>() == "binary" ? OutcomeKind::Binary
                                                                     : OutcomeKind::Continuous;
    o.beta_g0 = vec_from(jo.at("beta_g0"));
    o.beta_g1 = vec_from(jo.at("beta_g1"));
    o.psi_y = kernel_from_json(jo.at("psi_y"));
    o.delta = factors_from_json(jo.at("delta"), FactorLevel::L2Delta);
    o.anchors = tagged_from_json(jo.at("anchors"));
    o.x_std.mean = vec_from(jo.at("x_mean"));
    o.x_std.std = vec_from(jo.at("x_scale"));
    o.y_std.mean = jo.at("y_mean").get<double>();
    o.y_std.std = jo.at("y_scale").get<double>();
    o.sigma_y_tilde = jo.at("sigma_y_tilde").get<double>();
    o.gamma_y0 = jo.at("gamma_y0").get<double>();
    o.gamma_y1 = jo.at("gamma_y1").get<double>();
  }
  {
    const json& jp = j.at("propensity");
    PropensityModel& p = b.propensity;
    p.beta_h = vec_from(jp.at("beta_h"));
    p.psi_w = kernel_from_json(jp.at("psi_w"));
    p.eta = factors_from_json(jp.at("eta"), FactorLevel::L3Eta);
    p.anchors = tagged_from_json(jp.at("anchors"));
    p.x_std.mean = vec_from(jp.at("x_mean"));
    p.x_std.std = vec_from(jp.at("x_scale"));
    p.gamma_w = jp.at("gamma_w").get<double>();
  }
  return b;
}

}  // namespace adatrans
