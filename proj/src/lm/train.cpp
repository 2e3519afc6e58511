#include <vector>

#include "divot/lm_train.hpp"
#include "divot/patches.hpp"

namespace divot::vid {

void load_clip(const synth::CorpusReader& corpus, int index, const nn::TokenizerConfig& tc,
               ClipSample* out) {
  if (tc.frames != synth::kSparseFrames || tc.height != synth::kH || tc.width != synth::kW ||
      tc.channels != synth::kC)
    fail_config("load_clip: tokenizer dimensions do not match the clip format");
  synth::ClipRecord rec;
  corpus.read(index, &rec);
  std::vector<float> sparse(static_cast<size_t>(synth::kSparseFrames) * synth::kFramePixels);
  synth::extract_sparse(rec.dense.data(), sparse.data());
  out->patches.resize(static_cast<int64_t>(tc.frames) * tc.grid() * tc.patch_dim());
  patchify(sparse.data(), tc.frames, tc.height, tc.width, tc.channels, tc.patch,
           out->patches.data());
  out->caption = synth::encode_caption(synth::discretize(rec.spec));
}

void encode_targets(const nn::Tokenizer<float>& tok, ad::Tape<float>& tape, const float* patches,
                    int batch, bool pre_resampler, std::vector<float>* out) {
  const auto& tc = tok.config();
  tape.set_grad_enabled(false);
  tape.reset();
  ad::Ref<float> x = tape.borrow({batch, tc.frames, tc.grid(), tc.patch_dim()}, patches);
  ad::Ref<float> feats = pre_resampler ? tok.encode_pre_resampler(tape, x) : tok.encode(tape, x);
  out->assign(feats.value().begin(), feats.value().end());
  tape.reset();
  tape.set_grad_enabled(true);
}

}  // namespace divot::vid
