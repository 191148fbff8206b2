#pragma once

// Eigen <-> JSON helpers for artifact files. Non-finite numbers are written
// as the strings "inf", "-inf", "nan".

#include <Eigen/Core>
#include <json.hpp>

namespace til {

using Json = nlohmann::ordered_json;

Json number_json(double v);
double number_from_json(const nlohmann::json& j);

Json matrix_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_json(const nlohmann::json& j);
Json vector_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const nlohmann::json& j);

}  // namespace til
