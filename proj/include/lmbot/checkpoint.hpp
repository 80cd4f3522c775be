#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "lmbot/graph_teacher.hpp"
#include "lmbot/lm_encoder.hpp"
#include "lmbot/serialize.hpp"

namespace lmbot {

/// A deployable student: model, vocabulary and the serialization settings it
/// was trained with.
struct StudentCheckpoint {
  StudentModel model;
  Vocabulary vocab;
  SerializeOptions serialize;
  nlohmann::json manifest;
};

/// Writes params.bin, vocab.json and manifest.json into `dir`. `extra` is
/// merged into the manifest.
void save_student(const std::filesystem::path& dir, StudentModel& model, const Vocabulary& vocab,
                  const SerializeOptions& serialize, const nlohmann::json& extra = {});
StudentCheckpoint load_student(const std::filesystem::path& dir);

struct TeacherCheckpoint {
  std::unique_ptr<TeacherModel> model;
  nlohmann::json manifest;
};

void save_teacher(const std::filesystem::path& dir, TeacherModel& model, const nlohmann::json& extra = {});
TeacherCheckpoint load_teacher(const std::filesystem::path& dir);

/// Short content id: fingerprint of the parameter values.
std::string checkpoint_id(const ParameterRefs& params);

}  // namespace lmbot
