#include "lmbot/checkpoint.hpp"

#include "lmbot/error.hpp"
#include "lmbot/io.hpp"

namespace lmbot {

namespace fs = std::filesystem;

std::string checkpoint_id(const ParameterRefs& params) { return hex64(parameter_hash(params)); }

namespace {

nlohmann::json read_manifest(const fs::path& dir, const std::string& kind) {
  const auto file = dir / "manifest.json";
  if (!fs::exists(file)) throw DataError("no checkpoint manifest at " + file.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(file));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("unreadable manifest " + file.string() + ": " + e.what());
  }
  if (m.value("model", "") != kind)
    throw DataError(file.string() + " describes a '" + m.value("model", "") + "' checkpoint, expected " + kind);
  return m;
}

}  // namespace

void save_student(const fs::path& dir, StudentModel& model, const Vocabulary& vocab, const SerializeOptions& serialize,
                  const nlohmann::json& extra) {
  fs::create_directories(dir);
  auto params = model.parameters();
  save_parameters(dir / "params.bin", params);
  vocab.save(dir / "vocab.json");
  nlohmann::json m = {
      {"model", "student"},
      {"backend", model.backend().describe()},
      {"head_hidden", model.head().hidden_widths()},
      {"dropout", model.dropout()},
      {"max_length", serialize.max_length},
      {"sections",
       {{"metadata", serialize.sections.metadata},
        {"description", serialize.sections.description},
        {"tweets", serialize.sections.tweets}}},
      {"vocab_size", vocab.size()},
      {"vocab_hash", hex64(vocab.fingerprint())},
      {"id", checkpoint_id(params)},
  };
  if (extra.is_object()) m.update(extra);
  write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

StudentCheckpoint load_student(const fs::path& dir) {
  auto m = read_manifest(dir, "student");
  Vocabulary vocab = Vocabulary::load(dir / "vocab.json");
  if (m.at("vocab_hash").get<std::string>() != hex64(vocab.fingerprint()))
    throw DataError("vocabulary in " + dir.string() + " does not match its manifest");
  SerializeOptions opts;
  opts.max_length = m.at("max_length").get<std::size_t>();
  opts.sections.metadata = m.at("sections").at("metadata").get<bool>();
  opts.sections.description = m.at("sections").at("description").get<bool>();
  opts.sections.tweets = m.at("sections").at("tweets").get<bool>();

  const auto& b = m.at("backend");
  Rng rng(0);
  const auto width = b.at("width").get<Eigen::Index>();
  auto backend = make_backend(b.at("kind").get<std::string>(), vocab.size(), b.value("max_length", opts.max_length),
                              width, rng);
  ClassifierHead head(width, m.at("head_hidden").get<std::vector<Eigen::Index>>(), rng);
  StudentModel model(std::move(backend), std::move(head), m.at("dropout").get<double>());
  load_parameters(dir / "params.bin", model.parameters());
  return {std::move(model), std::move(vocab), opts, std::move(m)};
}

void save_teacher(const fs::path& dir, TeacherModel& model, const nlohmann::json& extra) {
  fs::create_directories(dir);
  auto params = model.parameters();
  save_parameters(dir / "params.bin", params);
  const auto& c = model.config();
  nlohmann::json m = {
      {"model", "teacher"},
      {"kind", to_string(c.kind)},
      {"layers", c.layers},
      {"hidden", c.hidden},
      {"dropout", c.dropout},
      {"l2", c.lambda2},
      {"lr", c.lr},
      {"max_epochs", c.max_epochs},
      {"patience", c.patience},
      {"input_width", model.input_width()},
      {"relations", model.relation_names()},
      {"id", checkpoint_id(params)},
  };
  if (extra.is_object()) m.update(extra);
  write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

TeacherCheckpoint load_teacher(const fs::path& dir) {
  auto m = read_manifest(dir, "teacher");
  TeacherConfig c;
  c.kind = parse_teacher_kind(m.at("kind").get<std::string>());
  c.layers = m.at("layers").get<int>();
  c.hidden = m.at("hidden").get<int>();
  c.dropout = m.at("dropout").get<double>();
  c.lambda2 = m.at("l2").get<double>();
  c.lr = m.at("lr").get<double>();
  c.max_epochs = m.at("max_epochs").get<int>();
  c.patience = m.at("patience").get<int>();
  Rng rng(0);
  auto model = std::make_unique<TeacherModel>(c, m.at("input_width").get<Eigen::Index>(),
                                              m.at("relations").get<std::vector<std::string>>(), rng);
  load_parameters(dir / "params.bin", model->parameters());
  return {std::move(model), std::move(m)};
}

}  // namespace lmbot
