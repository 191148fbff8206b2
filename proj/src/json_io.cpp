#include "til/json_io.hpp"

#include <cmath>
#include <stdexcept>

#include "til/csv.hpp"

namespace til {

Json number_json(double v) {
  if (std::isfinite(v)) return v;
  return format_number(v);
}

double number_from_json(const nlohmann::json& j) {
  if (j.is_string()) return parse_number(j.get<std::string>());
  if (!j.is_number()) throw std::invalid_argument("expected a number in JSON");
  return j.get<double>();
}

Json matrix_json(const Eigen::MatrixXd& m) {
  Json j = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(number_json(m(r, c)));
    j.push_back(std::move(row));
  }
  return j;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("expected a matrix (array of rows)");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw std::invalid_argument("ragged matrix in JSON");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = number_from_json(row[static_cast<std::size_t>(c)]);
  }
  return m;
}

Json vector_json(const Eigen::VectorXd& v) {
  Json j = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(number_json(v(i)));
  return j;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("expected a vector in JSON");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = number_from_json(j[i]);
  return v;
}

}  // namespace til
