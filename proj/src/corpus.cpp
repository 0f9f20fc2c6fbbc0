#include "lde/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace lde {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::string_view kArticleSlot = "{article}";
constexpr std::string_view kClassSlot = "{class}";

struct TemplateParts {
  std::string head;  // text before the article (or class) slot
  bool has_article = false;
  std::string mid;   // text between the article and class slots
  std::string tail;  // text after the class slot
};

TemplateParts split_template(std::string_view t) {
  TemplateParts p;
  const auto c = t.find(kClassSlot);
  const auto a = t.find(kArticleSlot);
  if (a != std::string_view::npos && a < c) {
    p.has_article = true;
    p.head = t.substr(0, a);
    p.mid = t.substr(a + kArticleSlot.size(), c - a - kArticleSlot.size());
  } else {
    p.head = t.substr(0, c);
  }
  p.tail = t.substr(c + kClassSlot.size());
  return p;
}

std::size_t count_of(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

std::string_view first_word(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  const auto sp = s.find(' ');
  return sp == std::string_view::npos ? s : s.substr(0, sp);
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    if (!out.empty()) out += ' ';
    out += p;
  }
  return out;
}

// Matches `phrase` at the start of s as whole words. Returns what follows the
// phrase (with the separating space removed), or nullopt.
std::optional<std::string_view> consume(std::string_view s, std::string_view phrase) {
  if (s.size() < phrase.size() || s.substr(0, phrase.size()) != phrase) return std::nullopt;
  if (s.size() == phrase.size()) return s.substr(s.size());
  if (s[phrase.size()] != ' ') return std::nullopt;
  return s.substr(phrase.size() + 1);
}

std::vector<std::string_view> clothes_prefixes(std::string_view noun) {
  if (noun == "hair") return {"with"};
  if (noun == "eyeglasses" || noun == "sunglasses") return {"wearing", "with"};
  return {"in", "wearing", "with"};
}

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80)
      extra = 0;
    else if ((c >> 5) == 0x6)
      extra = 1;
    else if ((c >> 4) == 0xe)
      extra = 2;
    else if ((c >> 3) == 0x1e)
      extra = 3;
    else
      return false;
    if (i + extra >= s.size() && extra > 0) return false;
    for (std::size_t k = 1; k <= extra; ++k)
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    i += extra + 1;
  }
  return true;
}

}  // namespace

std::string_view to_string(Category c) { return c == Category::Pedestrian ? "pedestrian" : "background"; }

std::optional<Category> category_from_string(std::string_view s) {
  if (s == "pedestrian") return Category::Pedestrian;
  if (s == "background") return Category::Background;
  return std::nullopt;
}

std::string_view to_string(AttributeType t) {
  switch (t) {
    case AttributeType::Age: return "age";
    case AttributeType::Body: return "body";
    case AttributeType::Expression: return "expression";
    case AttributeType::Clothes: return "clothes";
    case AttributeType::Color: return "color";
    case AttributeType::Pose: return "pose";
    case AttributeType::Direction: return "direction";
    case AttributeType::Action: return "action";
  }
  return "?";
}

std::optional<AttributeType> attribute_from_string(std::string_view s) {
  for (AttributeType t : kAttributeTypes)
    if (to_string(t) == s) return t;
  return std::nullopt;
}

bool AttributeLexicon::is_bare_clothes(std::string_view noun) const {
  return std::find(bare_clothes.begin(), bare_clothes.end(), noun) != bare_clothes.end();
}

bool AttributeLexicon::is_pedestrian_word(std::string_view word) const {
  return std::find(pedestrian_synonyms.begin(), pedestrian_synonyms.end(), word) != pedestrian_synonyms.end();
}

void AttributeLexicon::check() const {
  for (AttributeType t : kAttributeTypes)
    require(!of(t).empty(), "lexicon: attribute type '" + std::string(to_string(t)) + "' is empty");
  for (const auto& set : {templates, background_templates}) {
    require(!set.empty(), "lexicon: empty template list");
    for (const auto& t : set) {
      require(count_of(t, kClassSlot) == 1, "lexicon: template needs exactly one {class}: " + t);
      require(count_of(t, kArticleSlot) <= 1, "lexicon: template has several {article}: " + t);
    }
  }
  require(is_pedestrian_word("pedestrian"), "lexicon: pedestrian synonyms must include 'pedestrian'");
  require(pedestrian_synonyms.size() >= 6, "lexicon: need at least 5 pedestrian variants");
  require(background_classes.size() >= 20, "lexicon: need at least 20 background classes");
  for (const auto& c : background_classes)
    require(!is_pedestrian_word(c), "lexicon: background class is a pedestrian word: " + c);
}

std::vector<std::string> basic_templates() {
  std::vector<std::string> out = {
      "There is {article} {class} in the scene.",
      "There is the {class} in the scene.",
      "A photo of {article} {class} in the scene.",
      "A picture of {article} {class} in the scene.",
  };
  const char* qualities[] = {"", "blurry ", "cropped ", "close-up ", "bright ", "dark ", "low resolution ",
                             "black and white "};
  const char* media[] = {"photo", "picture", "rendering", "painting"};
  for (const char* q : qualities)
    for (const char* m : media) {
      const std::string lead = std::string("A ") + q + m + " of ";
      out.push_back(lead + "{article} {class}.");
      out.push_back(lead + "the {class}.");
    }
  for (const char* adj : {"nice", "cool", "weird", "clean", "dirty", "small", "large", "hard to see"}) {
    out.push_back(std::string("A photo of {article} ") + adj + " {class}.");
    out.push_back(std::string("A photo of the ") + adj + " {class}.");
  }
  const std::vector<std::string> rest = {
      "A painting of the small {class}.",
      "A low resolution painting of {article} small {class}.",
      "A picture of the dirty {class}.",
      "A rendering of the large {class}.",
      "A bad photo of {article} {class}.",
      "A good photo of the {class}.",
      "A jpeg corrupted photo of {article} {class}.",
      "A pixelated photo of the {class}.",
      "A rendition of {article} {class}.",
      "itap of {article} {class}.",
      "itap of the {class}.",
      "itap of my {class}.",
      "A photo of my {class}.",
      "A sculpture of {article} {class}.",
      "A drawing of {article} {class}.",
      "A sketch of the {class}.",
      "A doodle of {article} {class}.",
      "Graffiti of {article} {class}.",
      "A tattoo of {article} {class}.",
      "Art of the {class}.",
      "The plastic {class}.",
      "A toy {class}.",
      "The toy {class}.",
      "The origami {class}.",
      "The embroidered {class}.",
      "The cartoon {class}.",
      "A plushie {class}.",
      "The {class} in a video game.",
  };
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

std::vector<std::string> curate_templates(std::span<const std::string> raw) {
  // Adjectives that say nothing about how a pedestrian looks, or clash with the body attributes.
  static const std::vector<std::string> ambiguous = {"nice",  "cool",  "weird", "clean",
                                                     "dirty", "small", "large", "hard to see"};
  // Formats that do not depict a real-world pedestrian.
  static const std::vector<std::string> unreal = {"plastic", "toy",    "origami", "plushie", "cartoon",
                                                  "video game", "sculpture", "drawing", "sketch", "doodle",
                                                  "Graffiti", "tattoo", "Art of", "embroidered", " my "};
  std::vector<std::string> out;
  for (std::string t : raw) {
    if (std::any_of(unreal.begin(), unreal.end(), [&](const std::string& w) { return t.find(w) != std::string::npos; }))
      continue;
    for (const auto& adj : ambiguous) {
      const std::string needle = " " + adj + " {class}";
      const auto pos = t.find(needle);
      if (pos != std::string::npos) t.replace(pos, needle.size(), " {class}");
    }
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(std::move(t));
  }
  return out;
}

AttributeLexicon build_lexicon() {
  AttributeLexicon lex;
  lex.version = "1";
  auto set = [&](AttributeType t, std::vector<std::string> v) { lex.values[static_cast<std::size_t>(t)] = std::move(v); };
  set(AttributeType::Age, {"young", "old", "little", "elderly", "middle-aged", "teenage", "adult"});
  set(AttributeType::Body, {"tall", "short", "big", "small", "slim", "thin", "fat", "skinny"});
  set(AttributeType::Expression,
      {"smiling", "crying", "displeased", "happy", "sad", "angry", "laughing", "serious", "frowning"});
  set(AttributeType::Clothes, {"t-shirt", "dress",  "jeans",  "hat",   "hair",       "jacket",     "pants",
                               "backpack", "coat",  "shirt",  "skirt", "eyeglasses", "sunglasses", "clothes",
                               "sweater", "shorts", "cap",    "hoodie", "scarf",     "boots",      "suit"});
  set(AttributeType::Color,
      {"white", "black", "red", "blue", "green", "yellow", "gray", "brown", "pink", "orange", "purple"});
  set(AttributeType::Pose,
      {"standing", "walking", "sitting", "crouching", "running", "lying down", "bending over", "jumping"});
  set(AttributeType::Direction, {"in front", "in profile", "from behind", "from the side"});
  set(AttributeType::Action,
      {"riding a bicycle", "playing a baseball", "playing a basketball", "playing a guitar", "riding a bike",
       "exercising", "carrying a bag", "talking on a phone", "pushing a cart", "reading a book"});
  lex.bare_clothes = {"jeans", "hair", "pants", "eyeglasses", "sunglasses", "clothes", "shorts", "boots"};
  lex.pedestrian_synonyms = {"pedestrian", "person", "man",    "woman",  "boy",    "girl",
                             "lady",       "guy",    "child",  "kid",    "stroller", "hiker",
                             "commuter",   "player", "walker", "jogger", "gentleman"};
  // MS-COCO categories other than person.
  lex.background_classes = {
      "bicycle",    "car",         "motorcycle",   "airplane",      "bus",          "train",       "truck",
      "boat",       "traffic light", "fire hydrant", "stop sign",   "parking meter", "bench",      "bird",
      "cat",        "dog",         "horse",        "sheep",         "cow",          "elephant",    "bear",
      "zebra",      "giraffe",     "backpack",     "umbrella",      "handbag",      "tie",         "suitcase",
      "frisbee",    "skis",        "snowboard",    "sports ball",   "kite",         "baseball bat", "baseball glove",
      "skateboard", "surfboard",   "tennis racket", "bottle",       "wine glass",   "cup",         "fork",
      "knife",      "spoon",       "bowl",         "banana",        "apple",        "sandwich",    "orange",
      "broccoli",   "carrot",      "hot dog",      "pizza",         "donut",        "cake",        "chair",
      "couch",      "potted plant", "bed",         "dining table",  "toilet",       "tv",          "laptop",
      "mouse",      "remote",      "keyboard",     "cell phone",    "microwave",    "oven",        "toaster",
      "sink",       "refrigerator", "book",        "clock",         "vase",         "scissors",    "teddy bear",
      "hair drier", "toothbrush"};
  lex.background_templates = basic_templates();
  lex.templates = curate_templates(lex.background_templates);
  lex.check();
  return lex;
}

std::string_view indefinite_article(std::string_view next_word) {
  if (next_word.empty()) return "a";
  switch (std::tolower(static_cast<unsigned char>(next_word.front()))) {
    case 'a': case 'e': case 'i': case 'o': case 'u': return "an";
    default: return "a";
  }
}

namespace {

std::string fill_template(const std::string& tmpl, const std::string& noun_phrase) {
  const TemplateParts p = split_template(tmpl);
  std::string out = p.head;
  if (p.has_article) out += indefinite_article(first_word(p.mid + noun_phrase));
  out += p.mid;
  out += noun_phrase;
  out += p.tail;
  return out;
}

std::string clothes_phrase(const AttributeLexicon& lex, const AttributeMap& attrs, std::string_view prefix) {
  const auto clothes = attrs.find(AttributeType::Clothes);
  const auto color = attrs.find(AttributeType::Color);
  if (clothes != attrs.end()) {
    std::string core = color != attrs.end() ? color->second + " " + clothes->second : clothes->second;
    std::string out(prefix);
    out += ' ';
    if (!lex.is_bare_clothes(clothes->second)) {
      out += indefinite_article(core);
      out += ' ';
    }
    return out + core;
  }
  if (color != attrs.end()) return "in " + std::string(indefinite_article(color->second)) + " " + color->second;
  return {};
}

const std::string* attr(const AttributeMap& m, AttributeType t) {
  const auto it = m.find(t);
  return it == m.end() ? nullptr : &it->second;
}

}  // namespace

std::string compose_pedestrian_text(const AttributeLexicon& lex, const PedestrianChoice& c) {
  require(c.template_id < lex.templates.size(), "compose_pedestrian_text: template id out of range");
  std::vector<std::string> parts;
  for (AttributeType t : {AttributeType::Age, AttributeType::Body, AttributeType::Expression})
    if (const auto* v = attr(c.attributes, t)) parts.push_back(*v);
  parts.push_back(c.class_word);
  parts.push_back(clothes_phrase(lex, c.attributes, c.clothes_prefix));
  for (AttributeType t : {AttributeType::Pose, AttributeType::Direction, AttributeType::Action})
    if (const auto* v = attr(c.attributes, t)) parts.push_back(*v);
  return fill_template(lex.templates[c.template_id], join(parts));
}

std::string compose_background_text(const AttributeLexicon& lex, std::size_t template_id,
                                    std::string_view class_word, std::optional<std::string_view> color) {
  require(template_id < lex.background_templates.size(), "compose_background_text: template id out of range");
  std::string np = color ? std::string(*color) + " " + std::string(class_word) : std::string(class_word);
  return fill_template(lex.background_templates[template_id], np);
}

Description render_pedestrian(RngStream& rng, const AttributeLexicon& lex) {
  Description d;
  d.rng_seed = rng.state();
  d.category = Category::Pedestrian;
  PedestrianChoice c;
  c.template_id = rng.below(lex.templates.size());
  c.class_word = lex.pedestrian_synonyms[rng.below(lex.pedestrian_synonyms.size())];
  for (AttributeType t : kAttributeTypes) {
    if (rng.coin(0.5)) {
      const auto& vals = lex.of(t);
      c.attributes[t] = vals[rng.below(vals.size())];
    }
  }
  if (const auto* noun = attr(c.attributes, AttributeType::Clothes)) {
    const auto prefixes = clothes_prefixes(*noun);
    c.clothes_prefix = std::string(prefixes[rng.below(prefixes.size())]);
  }
  d.text = compose_pedestrian_text(lex, c);
  d.attributes = std::move(c.attributes);
  d.template_id = static_cast<std::int64_t>(c.template_id);
  return d;
}

Description render_background(RngStream& rng, const AttributeLexicon& lex) {
  Description d;
  d.rng_seed = rng.state();
  d.category = Category::Background;
  const std::size_t tid = rng.below(lex.background_templates.size());
  const std::string& cls = lex.background_classes[rng.below(lex.background_classes.size())];
  std::optional<std::string_view> color;
  if (rng.coin(0.5)) {
    const auto& colors = lex.of(AttributeType::Color);
    color = colors[rng.below(colors.size())];
    d.attributes[AttributeType::Color] = std::string(*color);
  }
  d.text = compose_background_text(lex, tid, cls, color);
  d.template_id = static_cast<std::int64_t>(tid);
  return d;
}

// ---------------------------------------------------------------------------
// Grammar validation

namespace {

class Parser {
 public:
  explicit Parser(const AttributeLexicon& lex) : lex_(lex) {}

  bool pedestrian(std::string_view np) {
    attrs_.clear();
    return front(np, 0);
  }

  bool background(std::string_view np) {
    attrs_.clear();
    if (class_then(np, lex_.background_classes, [](std::string_view rest) { return rest.empty(); })) return true;
    for (const auto& color : lex_.of(AttributeType::Color)) {
      if (auto r = consume(np, color)) {
        attrs_[AttributeType::Color] = color;
        if (class_then(*r, lex_.background_classes, [](std::string_view rest) { return rest.empty(); })) return true;
        attrs_.erase(AttributeType::Color);
      }
    }
    return false;
  }

  const std::string& class_word() const { return class_word_; }
  const AttributeMap& attributes() const { return attrs_; }

 private:
  static constexpr AttributeType kFront[] = {AttributeType::Age, AttributeType::Body, AttributeType::Expression};
  static constexpr AttributeType kBack[] = {AttributeType::Pose, AttributeType::Direction, AttributeType::Action};

  template <class Next>
  bool class_then(std::string_view s, const std::vector<std::string>& classes, Next&& next) {
    for (const auto& cls : classes) {
      if (auto r = consume(s, cls)) {
        class_word_ = cls;
        if (next(*r)) return true;
      }
    }
    return false;
  }

  bool front(std::string_view s, std::size_t stage) {
    if (stage == std::size(kFront))
      return class_then(s, lex_.pedestrian_synonyms, [this](std::string_view rest) { return clothes(rest); });
    if (front(s, stage + 1)) return true;
    const AttributeType t = kFront[stage];
    for (const auto& v : lex_.of(t)) {
      if (auto r = consume(s, v)) {
        attrs_[t] = v;
        if (front(*r, stage + 1)) return true;
        attrs_.erase(t);
      }
    }
    return false;
  }

  bool clothes(std::string_view s) {
    if (back(s, 0)) return true;
    for (std::string_view prefix : {"in", "wearing", "with"}) {
      const auto r = consume(s, prefix);
      if (!r) continue;
      for (std::string_view art : {"", "a", "an"}) {
        std::string_view a = *r;
        if (!art.empty()) {
          const auto x = consume(a, art);
          if (!x) continue;
          a = *x;
        }
        // "in a gray": color without a garment.
        if (prefix == "in" && !art.empty()) {
          for (const auto& color : lex_.of(AttributeType::Color)) {
            const auto x = consume(a, color);
            if (!x || indefinite_article(color) != art) continue;
            attrs_[AttributeType::Color] = color;
            if (back(*x, 0)) return true;
            attrs_.erase(AttributeType::Color);
          }
        }
        if (garment(a, prefix, art, std::nullopt)) return true;
        for (const auto& color : lex_.of(AttributeType::Color)) {
          const auto x = consume(a, color);
          if (!x) continue;
          if (garment(*x, prefix, art, color)) return true;
        }
      }
    }
    return false;
  }

  bool garment(std::string_view s, std::string_view prefix, std::string_view art, std::optional<std::string> color) {
    for (const auto& noun : lex_.of(AttributeType::Clothes)) {
      const auto r = consume(s, noun);
      if (!r) continue;
      const auto allowed = clothes_prefixes(noun);
      if (std::find(allowed.begin(), allowed.end(), prefix) == allowed.end()) continue;
      if (lex_.is_bare_clothes(noun)) {
        if (!art.empty()) continue;
      } else if (art != indefinite_article(color ? *color : noun)) {
        continue;
      }
      attrs_[AttributeType::Clothes] = noun;
      if (color) attrs_[AttributeType::Color] = *color;
      if (back(*r, 0)) return true;
      attrs_.erase(AttributeType::Clothes);
      attrs_.erase(AttributeType::Color);
    }
    return false;
  }

  bool back(std::string_view s, std::size_t stage) {
    if (stage == std::size(kBack)) return s.empty();
    if (back(s, stage + 1)) return true;
    const AttributeType t = kBack[stage];
    for (const auto& v : lex_.of(t)) {
      if (auto r = consume(s, v)) {
        attrs_[t] = v;
        if (back(*r, stage + 1)) return true;
        attrs_.erase(t);
      }
    }
    return false;
  }

  const AttributeLexicon& lex_;
  AttributeMap attrs_;
  std::string class_word_;
};

// Returns the noun phrase of text under template t, or nullopt if the fixed
// parts of the template do not match (including a/an agreement).
std::optional<std::string_view> noun_phrase(std::string_view text, const std::string& tmpl) {
  const TemplateParts p = split_template(tmpl);
  if (text.size() < p.head.size() + p.tail.size()) return std::nullopt;
  if (text.substr(0, p.head.size()) != p.head) return std::nullopt;
  if (text.substr(text.size() - p.tail.size()) != p.tail) return std::nullopt;
  std::string_view middle = text.substr(p.head.size(), text.size() - p.head.size() - p.tail.size());
  if (!p.has_article) return middle;
  std::string_view art;
  if (middle.substr(0, 2) == "a ")
    art = "a";
  else if (middle.substr(0, 3) == "an ")
    art = "an";
  else
    return std::nullopt;
  std::string_view rest = middle.substr(art.size());
  if (rest.substr(0, p.mid.size()) != p.mid) return std::nullopt;
  if (indefinite_article(first_word(rest)) != art) return std::nullopt;
  std::string_view np = rest.substr(p.mid.size());
  if (np.empty()) return std::nullopt;
  return np;
}

}  // namespace

ConformanceReport validate_description(std::string_view text, const AttributeLexicon& lex) {
  ConformanceReport report;
  if (text.empty() || text.back() != '.') {
    report.reason = "text must be non-empty and end with a period";
    return report;
  }
  Parser parser(lex);
  bool any_frame = false;
  auto try_set = [&](const std::vector<std::string>& templates, Category cat) {
    for (std::size_t i = 0; i < templates.size(); ++i) {
      const auto np = noun_phrase(text, templates[i]);
      if (!np) continue;
      any_frame = true;
      const bool ok = cat == Category::Pedestrian ? parser.pedestrian(*np) : parser.background(*np);
      if (!ok) continue;
      report.conforms = true;
      report.category = cat;
      report.template_id = static_cast<std::int64_t>(i);
      report.class_word = parser.class_word();
      report.attributes = parser.attributes();
      return true;
    }
    return false;
  };
  if (try_set(lex.templates, Category::Pedestrian) || try_set(lex.background_templates, Category::Background))
    return report;
  report.reason = any_frame ? "noun phrase does not match the attribute grammar" : "no template frame matches";
  return report;
}

// ---------------------------------------------------------------------------
// Corpus generation

bool contains_word(std::string_view text, std::string_view word) {
  if (word.empty()) return false;
  const std::string t = lowercase(text);
  const std::string w = lowercase(word);
  auto is_alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (auto pos = t.find(w); pos != std::string::npos; pos = t.find(w, pos + 1)) {
    const bool left = pos == 0 || !is_alnum(t[pos - 1]);
    const bool right = pos + w.size() == t.size() || !is_alnum(t[pos + w.size()]);
    if (left && right) return true;
  }
  return false;
}

Corpus generate_corpus(const CorpusConfig& config, const AttributeLexicon& lex) {
  require(config.n_ped >= 1, "generate_corpus: n_ped must be >= 1");
  require(config.n_bg >= 1, "generate_corpus: n_bg must be >= 1");
  Corpus corpus;
  corpus.config = config;
  corpus.descriptions.reserve(config.n_ped + config.n_bg);
  std::unordered_set<std::string> seen;

  auto fill = [&](Category cat, std::size_t n) {
    for (std::size_t slot = 0; slot < n; ++slot) {
      bool placed = false;
      for (std::size_t attempt = 0; attempt < kMaxRerolls && !placed; ++attempt) {
        RngStream rng(derive_seed(config.seed, static_cast<std::uint64_t>(cat), slot, attempt));
        Description d = cat == Category::Pedestrian ? render_pedestrian(rng, lex) : render_background(rng, lex);
        if (!seen.insert(lowercase(d.text)).second) continue;
        d.id = corpus.descriptions.size();
        corpus.descriptions.push_back(std::move(d));
        placed = true;
      }
      if (!placed)
        throw DuplicateExhaustionError("generate_corpus: grammar cannot yield " + std::to_string(n) + " distinct " +
                                       std::string(to_string(cat)) + " descriptions (exhausted at slot " +
                                       std::to_string(slot) + ")");
    }
  };
  fill(Category::Pedestrian, config.n_ped);
  fill(Category::Background, config.n_bg);
  corpus.n_pedestrian = config.n_ped;
  corpus.n_background = config.n_bg;

  if (config.external_bg_file) {
    std::ifstream in(*config.external_bg_file);
    if (!in) throw PreconditionError("generate_corpus: cannot open external file " + config.external_bg_file->string());
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      std::string_view v = line;
      while (!v.empty() && std::isspace(static_cast<unsigned char>(v.front()))) v.remove_prefix(1);
      while (!v.empty() && std::isspace(static_cast<unsigned char>(v.back()))) v.remove_suffix(1);
      const bool control = std::any_of(v.begin(), v.end(), [](char c) {
        return static_cast<unsigned char>(c) < 0x20 || c == 0x7f;
      });
      if (v.empty() || v.size() > 1000 || control || !is_valid_utf8(v)) {
        ++corpus.external_skipped;
        continue;
      }
      const bool pedestrian = std::any_of(lex.pedestrian_synonyms.begin(), lex.pedestrian_synonyms.end(),
                                          [&](const std::string& w) { return contains_word(v, w); });
      std::string text(v);
      if (text.back() != '.') text += '.';
      if (pedestrian || !seen.insert(lowercase(text)).second) {
        ++corpus.external_filtered;
        continue;
      }
      Description d;
      d.id = corpus.descriptions.size();
      d.text = std::move(text);
      d.category = Category::Background;
      corpus.descriptions.push_back(std::move(d));
      ++corpus.n_background;
    }
  }
  return corpus;
}

std::string description_to_json_line(const Description& d) {
  ordered_json attrs = ordered_json::object();
  for (const auto& [t, v] : d.attributes) attrs[std::string(to_string(t))] = v;
  ordered_json j;
  j["id"] = d.id;
  j["text"] = d.text;
  j["category"] = std::string(to_string(d.category));
  j["attributes"] = std::move(attrs);
  j["template_id"] = d.template_id;
  j["rng_seed"] = d.rng_seed;
  return j.dump();
}

Description description_from_json_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  Description d;
  d.id = j.at("id").get<std::uint64_t>();
  d.text = j.at("text").get<std::string>();
  const auto cat = category_from_string(j.at("category").get<std::string>());
  if (!cat) throw PreconditionError("unknown category in corpus line");
  d.category = *cat;
  for (const auto& [k, v] : j.at("attributes").items()) {
    const auto t = attribute_from_string(k);
    if (!t) throw PreconditionError("unknown attribute type '" + k + "' in corpus line");
    d.attributes[*t] = v.get<std::string>();
  }
  d.template_id = j.at("template_id").get<std::int64_t>();
  d.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  return d;
}

std::string corpus_to_jsonl(std::span<const Description> descriptions) {
  std::string out;
  for (const auto& d : descriptions) {
    out += description_to_json_line(d);
    out += '\n';
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, std::span<const Description> descriptions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::string s = corpus_to_jsonl(descriptions);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::vector<Description> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<Description> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(description_from_json_line(line));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace lde
