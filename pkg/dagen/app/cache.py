from dagen.base.cache import create_cache

cache_checkpoints = None
cache_prompt_embeddings = None


def init_caches():
    global cache_checkpoints
    cache_checkpoints = create_cache("checkpoints")

    # embeddings are a pure function of (encoder id, text)
    global cache_prompt_embeddings
    cache_prompt_embeddings = create_cache("prompt_embeddings")


def get_cache(name):
    if cache_checkpoints is None:
        init_caches()
    return {"checkpoints": cache_checkpoints, "prompt_embeddings": cache_prompt_embeddings}[name]


def clear_all_caches():
    if cache_checkpoints is None:
        return
    cache_checkpoints.invalidate(hard=True)
    cache_prompt_embeddings.invalidate(hard=True)
